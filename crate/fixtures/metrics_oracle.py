#!/usr/bin/env python3
"""Writes metrics_oracle.json from the raw session files, sharing no code with the crate.

    python3 fixtures/metrics_oracle.py
"""
import json
import math
from datetime import datetime
from pathlib import Path

HERE = Path(__file__).parent


def stat(xs):
    n = len(xs)
    if n == 0:
        return {"n": 0, "mean": None, "sd": None}
    mean = math.fsum(xs) / n
    sd = math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (n - 1)) if n > 1 else None
    return {"n": n, "mean": mean, "sd": sd}


def words(s):
    return len(s.split())


def ts(s):
    return datetime.fromisoformat(s.replace("Z", "+00:00"))


def load(path):
    rows = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
    header = rows[0]
    status = "active"
    turns, events = [], []
    for r in rows[1:]:
        if r["kind"] == "turn":
            turns.append(r)
        elif r["kind"] == "gate_event":
            events.append(r)
        elif r["kind"] == "status":
            status = r["status"]
    return header, status, turns, events


def session(header, status, turns):
    sys_turns = [t for t in turns if t["origin"] in ("scripted", "generated")]
    opens = [t for t in turns if t["origin"] == "learner_open"]
    gens = [i for i, t in enumerate(turns) if t["origin"] == "generated"]
    followups = 0
    for i in gens:
        # another generated turn earlier in the same scripted visit
        j = i - 1
        while j >= 0 and turns[j]["origin"] != "scripted":
            if turns[j]["origin"] == "generated":
                followups += 1
                break
            j -= 1
    events = []
    for i in gens:
        if i == 0 or turns[i - 1]["origin"] != "learner_open":
            continue
        after = [t for t in turns[i + 1:] if t["origin"] == "learner_open"]
        if not after:
            continue
        pre, post = words(turns[i - 1]["text"]), words(after[0]["text"])
        events.append({
            "session_id": header["session_id"],
            "generated_turn_index": i,
            "pre_len": pre,
            "post_len": post,
            "ratio": post / pre if pre else None,
        })
    dur = (ts(turns[-1]["timestamp"]) - ts(turns[0]["timestamp"])).total_seconds() / 60 if turns else None
    return {
        "session_id": header["session_id"],
        "scenario_id": header["scenario_id"],
        "status": status,
        "total_turns": len(turns),
        "system_turns": len(sys_turns),
        "learner_turns": len(turns) - len(sys_turns),
        "open_turns": len(opens),
        "option_turns": sum(t["origin"] == "learner_option" for t in turns),
        "learner_words_per_open_turn": stat([words(t["text"]) for t in opens]),
        "system_words_per_turn": stat([words(t["text"]) for t in sys_turns]),
        "llm_triggers": len(gens),
        "followup_triggers": followups,
        "duration_minutes": dur,
        "expansion_events": events,
    }


def main():
    loaded = sorted((load(p) for p in (HERE / "metrics_store").glob("*.jsonl")), key=lambda x: x[0]["session_id"])
    sessions = [session(h, s, t) for h, s, t, _ in loaded]
    all_turns = [t for _, _, ts_, _ in loaded for t in ts_]
    evs = [e for s in sessions for e in s["expansion_events"]]

    def count(key):
        xs = [s[key] for s in sessions]
        return {"total": sum(xs), "per_session": stat(xs)}

    pooled = {
        "sessions": len(sessions),
        **{k: count(k) for k in ("total_turns", "system_turns", "learner_turns", "open_turns",
                                 "option_turns", "llm_triggers", "followup_triggers")},
        "duration_minutes": stat([s["duration_minutes"] for s in sessions if s["duration_minutes"] is not None]),
        "learner_words_per_open_turn": stat([words(t["text"]) for t in all_turns if t["origin"] == "learner_open"]),
        "system_words_per_turn": stat([words(t["text"]) for t in all_turns if t["speaker"] == "system"]),
        "expansion_events": len(evs),
        "zero_pre_events": sum(e["ratio"] is None for e in evs),
        "expansion_factor": stat([e["ratio"] for e in evs if e["ratio"] is not None]),
        "pre_words": stat([e["pre_len"] for e in evs]),
        "post_words": stat([e["post_len"] for e in evs]),
    }

    gold = json.loads((HERE / "metrics_gold.json").read_text())
    finals = {(h["session_id"], e["turn_index"]): e["final"] for h, _, _, es in loaded for e in es}
    cm = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for g in gold:
        triggered = finals[(g["session_id"], g["turn_index"])] == "not_relevant"
        cm[{(True, False): "tp", (True, True): "fp", (False, True): "tn", (False, False): "fn"}[(triggered, g["human_relevant"])]] += 1

    out = {"sessions": sessions, "pooled": pooled, "confusion": cm}
    (HERE / "metrics_oracle.json").write_text(json.dumps(out, indent=2) + "\n")


if __name__ == "__main__":
    main()
