"""Seeded synthetic music-like tracks for desk-scale tests.

Each track gets its own tempo, scale, timbre and note sequence, giving
distinct spectral content with clear note onsets (plucked envelopes and
percussive clicks) so anchor selection and discrimination behave like they
do on real music.
"""

from __future__ import annotations

import os

import numpy as np

from printdex.audio import AudioBuffer, save_wav
from printdex.pipeline import ManifestEntry, write_manifest

SCALES = (
    (0, 2, 4, 7, 9),  # major pentatonic
    (0, 3, 5, 7, 10),  # minor pentatonic
    (0, 2, 3, 5, 7, 9, 10),  # dorian
    (0, 2, 4, 5, 7, 9, 11),  # major
)


def _midi_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


def _add_note(out, sr, start_s, dur_s, freq, amp, partial_rolloff, decay_s, rng):
    start = int(start_s * sr)
    n = int(dur_s * sr)
    if start >= len(out) or n <= 0:
        return
    n = min(n, len(out) - start)
    t = np.arange(n) / sr
    env = np.minimum(t / 0.005, 1.0) * np.exp(-t / decay_s)
    wave = np.zeros(n)
    nyquist = sr / 2.0
    for h in range(1, 9):
        f = freq * h
        if f >= nyquist * 0.95:
            break
        wave += (h**-partial_rolloff) * np.sin(2.0 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    out[start : start + n] += amp * env * wave


def _add_click(out, sr, start_s, dur_s, amp, band, rng):
    start = int(start_s * sr)
    n = int(dur_s * sr)
    if start >= len(out) or n <= 0:
        return
    n = min(n, len(out) - start)
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spectrum[(freqs < band[0]) | (freqs > band[1])] = 0.0
    shaped = np.fft.irfft(spectrum, n=n)
    peak = np.abs(shaped).max()
    if peak > 0:
        shaped /= peak
    env = np.exp(-np.arange(n) / (0.2 * n + 1))
    out[start : start + n] += amp * env * shaped


def synth_track(seed: int, duration_s: float = 30.0, sr: int = 11025) -> AudioBuffer:
    rng = np.random.default_rng(seed)
    out = np.zeros(int(duration_s * sr))
    tempo = rng.uniform(84.0, 152.0)
    beat = 60.0 / tempo
    eighth = beat / 2.0
    root = 45 + int(rng.integers(12))
    scale = SCALES[int(rng.integers(len(SCALES)))]
    rolloff = rng.uniform(0.7, 1.6)
    decay = rng.uniform(0.25, 0.6)
    degree = int(rng.integers(len(scale)))
    slot = 0.0
    while slot < duration_s:
        if rng.random() < 0.62:
            degree = int(np.clip(degree + rng.integers(-2, 3), 0, len(scale) - 1))
            octave = int(rng.integers(1, 3))
            midi = root + 12 * octave + scale[degree]
            dur = eighth * int(rng.integers(1, 4))
            _add_note(out, sr, slot, dur + 0.15, _midi_hz(midi), rng.uniform(0.4, 0.9), rolloff, decay, rng)
        slot += eighth
    t_beat = 0.0
    while t_beat < duration_s:
        if rng.random() < 0.8:
            fifth = scale[0] if rng.random() < 0.6 else scale[min(2, len(scale) - 1)]
            _add_note(out, sr, t_beat, beat * 1.5, _midi_hz(root + fifth), rng.uniform(0.3, 0.6), 1.0, decay * 1.5, rng)
        _add_click(out, sr, t_beat, 0.02, rng.uniform(0.3, 0.6), (1800.0, 4200.0), rng)
        if rng.random() < 0.5:
            _add_click(out, sr, t_beat + eighth, 0.012, rng.uniform(0.1, 0.25), (3000.0, 5200.0), rng)
        t_beat += beat
    out = np.tanh(1.2 * out / max(np.abs(out).max(), 1e-9))
    out *= 0.95 / max(np.abs(out).max(), 1e-9)
    return AudioBuffer(samples=out, sample_rate=sr)


def build_corpus(directory, n_tracks: int, duration_s: float = 30.0, sr: int = 11025, seed0: int = 1000):
    """Write n_tracks WAVs plus a manifest; returns (manifest_path, entries)."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i in range(n_tracks):
        path = os.path.join(directory, f"track{i:04d}.wav")
        save_wav(path, synth_track(seed0 + i, duration_s, sr))
        entries.append(ManifestEntry(track_id=i + 1, path=path, label=f"track{i:04d}"))
    manifest = os.path.join(directory, "manifest.tsv")
    write_manifest(manifest, entries)
    return manifest, entries
