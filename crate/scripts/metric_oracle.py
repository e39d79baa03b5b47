#!/usr/bin/env python3
"""Reference values for the span metrics, computed with exact fractions.

Writes fixtures/metric_fixtures.json: a list of
{name, notes: [[pitch, duration], ...], n, m, expected: {cmm, lm, centr}}.
"""

import json
import random
from fractions import Fraction
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def onsets(notes):
    """(position, pitch) for every note, plus total length."""
    pos, out = 0, []
    for pitch, dur in notes:
        out.append((pos, pitch))
        pos += dur
    return out, pos


def windows(length, n, m):
    """Start/end cell of every span. Starts slide by m while a full span fits;
    the last span runs to the end of the song."""
    if length <= n:
        return [(0, length)]
    starts = list(range(0, length - n + 1, m))
    spans = [(s, s + n) for s in starts]
    spans[-1] = (starts[-1], length)
    return spans


def span_pitches(notes, n, m):
    ons, length = onsets(notes)
    result = []
    for lo, hi in windows(length, n, m):
        result.append([p for (t, p) in ons if lo <= t < hi])
    return result


def cmm(notes, n, m):
    scores = []
    for ps in span_pitches(notes, n, m):
        if len(ps) < 2:
            continue
        steps = [abs(b - a) for a, b in zip(ps, ps[1:])]
        scores.append(Fraction(sum(steps), len(steps)))
    if not scores:
        ps = [p for p, _ in notes]
        steps = [abs(b - a) for a, b in zip(ps, ps[1:])]
        return Fraction(sum(steps), len(steps))
    return sum(scores) / len(scores)


def lm_score(d):
    if d < 5:
        return Fraction(5, d)
    if d <= 8:
        return Fraction(1)
    return Fraction(d, 8)


def lm(notes, n, m):
    scores = [lm_score(len(set(ps))) for ps in span_pitches(notes, n, m) if ps]
    return sum(scores) / len(scores)


def centr(notes, n, m):
    scores = []
    for ps in span_pitches(notes, n, m):
        if not ps:
            continue
        counts = {}
        for p in ps:
            counts[p] = counts.get(p, 0) + 1
        scores.append(Fraction(max(counts.values()), len(ps)))
    return sum(scores) / len(scores)


def fixtures():
    rng = random.Random(20240611)
    items = []

    def add(name, notes, n=32, m=4):
        items.append({"name": name, "notes": [list(x) for x in notes], "n": n, "m": m})

    add("constant_pitch", [(60, 4)] * 12)
    add("chromatic_quarters", [(60 + i, 4) for i in range(12)])
    add("arpeggio_three_bars", [(60, 4), (64, 4), (67, 4)] * 4)
    add("twelve_tone_bars", [(60 + i, 1 if i < 8 else 2) for i in range(12)] * 3)
    add("seed_then_steps", [(62, 8), (64, 4), (65, 4), (67, 2), (65, 2), (64, 4), (62, 8), (60, 4), (62, 4), (64, 8)])
    add("short_single_span", [(70, 2), (72, 2), (70, 4), (67, 4), (65, 6)])
    add("pitch_extremes", [(0, 4), (127, 4), (0, 2), (1, 2), (126, 8), (127, 4), (0, 16)])
    add("unaligned_tail", [(60, 3), (62, 5), (64, 7), (65, 1), (67, 6), (69, 2), (71, 9), (72, 3), (71, 14)])
    add("long_notes_fallback", [(60, 16), (67, 16), (64, 16), (72, 16)], n=8, m=4)

    walk, p = [], 67
    for _ in range(48):
        p = max(48, min(84, p + rng.choice([-5, -3, -2, -1, -1, 0, 1, 1, 2, 3, 4, 7])))
        walk.append((p, rng.choice([1, 2, 2, 4, 4, 4, 6, 8, 12, 16])))
    add("random_walk", walk)

    for it in items:
        notes = [tuple(x) for x in it["notes"]]
        it["expected"] = {
            "cmm": float(cmm(notes, it["n"], it["m"])),
            "lm": float(lm(notes, it["n"], it["m"])),
            "centr": float(centr(notes, it["n"], it["m"])),
        }
    return items


def main():
    items = fixtures()
    out = ROOT / "fixtures" / "metric_fixtures.json"
    out.write_text(json.dumps(items, indent=1) + "\n")
    for it in items:
        e = it["expected"]
        print(f"{it['name']:<22} cmm {e['cmm']:.6f}  lm {e['lm']:.6f}  centr {e['centr']:.6f}")


if __name__ == "__main__":
    main()
