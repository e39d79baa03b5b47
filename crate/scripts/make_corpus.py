#!/usr/bin/env python3
"""Regenerate the bundled MIDI mini-corpus, the toy memorization song and the
reference note dumps.

The melodies are synthetic folk-style tunes: scale-degree random walks over
stock one-bar rhythm cells. The files deliberately vary in the features the
reader has to cope with (format 0/1, several PPQ values, running status,
velocity-0 note-offs, timing jitter, detached articulation, rests, stacked
chord tones), and a handful violate the cleaning rules on purpose.

Reference dumps are decoded with mido, independently of the Rust reader.

    python3 scripts/make_corpus.py
"""

import json
import os
import random

import mido

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CORPUS = os.path.join(ROOT, "corpus")
FIXTURES = os.path.join(ROOT, "fixtures")

MAJOR = [0, 2, 4, 5, 7, 9, 11]
MINOR = [0, 2, 3, 5, 7, 8, 10]

# one-bar rhythm cells in 16th units, each summing to 16
RHYTHMS = [
    [4, 4, 4, 4],
    [4, 4, 8],
    [8, 4, 4],
    [8, 8],
    [2, 2, 4, 4, 4],
    [4, 2, 2, 4, 4],
    [6, 2, 4, 4],
    [4, 4, 2, 2, 4],
    [3, 1, 4, 4, 4],
    [4, 4, 4, 2, 2],
    [12, 4],
    [2, 2, 2, 2, 4, 4],
    [16],
]

SEED = [(62, 8), (64, 4), (65, 4)]


def degree_pitch(tonic, scale, degree):
    octave, step = divmod(degree, len(scale))
    return tonic + 12 * octave + scale[step]


def make_tune(rng, seeded=False):
    if seeded:
        tonic, scale = rng.choice([(60, MAJOR), (62, MINOR)])
    else:
        tonic = rng.choice([55, 57, 58, 60, 62, 64, 65, 67])
        scale = rng.choice([MAJOR, MAJOR, MINOR])
    bars = rng.randint(8, 16)
    notes = []
    if seeded:
        notes.extend(SEED)
        degree = 3 if scale is MAJOR else 2
        start_bar = 1
    else:
        degree = rng.choice([0, 2, 4])
        start_bar = 0
    for bar in range(start_bar, bars):
        cell = rng.choice(RHYTHMS[:-1]) if bar < bars - 1 else [8, 8]
        for i, dur in enumerate(cell):
            if bar == bars - 1 and i == len(cell) - 1:
                degree = 0 if abs(degree) < 4 else 7 * round(degree / 7)
            else:
                step = rng.choices(
                    [-1, 1, -2, 2, 0, -3, 3, 4, -4],
                    weights=[26, 26, 10, 10, 10, 5, 5, 4, 4],
                )[0]
                degree = max(-4, min(11, degree + step))
            notes.append((degree_pitch(tonic, scale, degree), dur))
    return notes


def to_events(notes, unit, rng, *, jitter=0, legato=1.0, rests=None, chords=()):
    """Absolute-time (tick, kind, pitch) events for a (pitch, duration) list."""
    rests = rests or {}
    events = []
    t = 0
    for i, (pitch, dur) in enumerate(notes):
        t += rests.get(i, 0) * unit
        on = t + (rng.randint(-jitter, jitter) if jitter and t > 0 else 0)
        length = max(1, int(dur * unit * legato))
        events.append((on, 1, pitch))
        events.append((on + length, 0, pitch))
        if i in chords:
            events.append((on, 1, pitch - 4))
            events.append((on + length, 0, pitch - 4))
        t += dur * unit
    events.sort(key=lambda e: (e[0], e[1]))
    return events


def track_from_events(events, vel0_off, channel=0):
    track = mido.MidiTrack()
    last = 0
    for tick, kind, pitch in events:
        delta = tick - last
        last = tick
        if kind == 1:
            msg = mido.Message("note_on", note=pitch, velocity=80, channel=channel, time=delta)
        elif vel0_off:
            msg = mido.Message("note_on", note=pitch, velocity=0, channel=channel, time=delta)
        else:
            msg = mido.Message("note_off", note=pitch, velocity=64, channel=channel, time=delta)
        track.append(msg)
    track.append(mido.MetaMessage("end_of_track", time=0))
    return track


def write_file(path, notes, rng, ppq, fmt, **kw):
    vel0 = kw.pop("vel0_off", False)
    unit = ppq // 4
    events = to_events(notes, unit, rng, **kw)
    mid = mido.MidiFile(type=fmt, ticks_per_beat=ppq)
    tempo = mido.MetaMessage("set_tempo", tempo=rng.choice([500000, 600000, 428571]), time=0)
    melody = track_from_events(events, vel0)
    if fmt == 0:
        melody.insert(0, tempo)
        mid.tracks.append(melody)
    else:
        conductor = mido.MidiTrack()
        conductor.append(mido.MetaMessage("track_name", name="conductor", time=0))
        conductor.append(tempo)
        conductor.append(mido.MetaMessage("time_signature", numerator=4, denominator=4, time=0))
        conductor.append(mido.MetaMessage("end_of_track", time=0))
        mid.tracks.append(conductor)
        melody.insert(0, mido.MetaMessage("track_name", name="melody", time=0))
        melody.insert(1, mido.Message("program_change", program=73, channel=0, time=0))
        mid.tracks.append(melody)
        if rng.random() < 0.3:
            # a second instrument track that the reader must ignore
            bass = [(p - 24, d) for p, d in notes]
            mid.tracks.append(track_from_events(to_events(bass, unit, rng), False, channel=1))
    mid.save(path)


def reference_dump(path):
    """All notes of every track as [onset_ticks, duration_ticks, pitch]."""
    mid = mido.MidiFile(path)
    out = []
    for track in mid.tracks:
        now = 0
        open_notes = {}
        for msg in track:
            now += msg.time
            if msg.type == "note_on" and msg.velocity > 0:
                open_notes.setdefault((msg.channel, msg.note), []).append(now)
            elif msg.type in ("note_off", "note_on"):
                starts = open_notes.get((msg.channel, msg.note))
                if starts:
                    start = starts.pop(0)
                    if now > start:
                        out.append([start, now - start, msg.note])
    out.sort(key=lambda n: (n[0], -n[2]))
    return out


def toy_song(rng):
    """200 notes, every (pitch, duration) token distinct."""
    durs = [1, 2, 3, 4, 6, 8]
    used = set()
    notes = []
    pitch = 67
    while len(notes) < 200:
        candidates = [
            (p, d)
            for p in range(pitch - 5, pitch + 6)
            for d in durs
            if 40 <= p <= 100 and (p, d) not in used and p != pitch
        ]
        if not candidates:
            candidates = [(p, d) for p in range(40, 101) for d in durs if (p, d) not in used]
            candidates.sort(key=lambda c: abs(c[0] - pitch))
            candidates = candidates[:6]
        choice = rng.choice(candidates)
        used.add(choice)
        notes.append(choice)
        pitch = choice[0]
    return notes


def main():
    rng = random.Random(20201)
    os.makedirs(CORPUS, exist_ok=True)
    os.makedirs(os.path.join(FIXTURES, "reference"), exist_ok=True)
    for old in os.listdir(CORPUS):
        if old.endswith(".mid"):
            os.remove(os.path.join(CORPUS, old))

    count = 140
    for idx in range(1, count + 1):
        seeded = idx % 9 == 1
        notes = make_tune(rng, seeded=seeded)
        kw = {}
        ppq = rng.choice([96, 192, 240, 384, 480, 960])
        fmt = rng.choice([0, 1, 1])
        if idx % 4 == 0:
            kw["jitter"] = ppq // 32
        if idx % 3 == 0:
            kw["legato"] = 0.85
        if idx % 5 == 0:
            kw["vel0_off"] = True
        if idx % 7 == 0:
            # short rest absorbed into the previous note
            i = rng.randrange(4, len(notes) - 4)
            if notes[i - 1][1] <= 12:
                kw["rests"] = {i: 4}
        if idx % 11 == 0:
            kw["chords"] = set(rng.sample(range(len(notes)), 3))
        if idx in (13, 57, 101):
            notes = notes[:9]
        if idx in (29, 88):
            notes[len(notes) // 2] = (notes[len(notes) // 2][0], 24)
        if idx == 77:
            # long rest splits the tune; the longer segment survives
            kw["rests"] = {len(notes) // 3: 16}
        write_file(os.path.join(CORPUS, f"{idx:03d}.mid"), notes, rng, ppq, fmt, **kw)

    ref = reference_dump(os.path.join(CORPUS, "001.mid"))
    with open(os.path.join(FIXTURES, "reference", "001.json"), "w") as f:
        json.dump(ref, f)
        f.write("\n")

    toy = toy_song(random.Random(7))
    toy_path = os.path.join(FIXTURES, "toy.mid")
    mid = mido.MidiFile(type=0, ticks_per_beat=480)
    mid.tracks.append(track_from_events(to_events(toy, 120, rng), False))
    mid.save(toy_path)
    with open(os.path.join(FIXTURES, "toy.json"), "w") as f:
        json.dump([list(n) for n in toy], f)
        f.write("\n")


if __name__ == "__main__":
    main()
