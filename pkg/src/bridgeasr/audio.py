"""WAV I/O, dataset manifests, and the synthetic tone corpus.

Each token is synthesized as a fixed-duration pure tone at a frequency
unique to its id, so the audio->text mapping is injective by construction
and the whole pipeline can be verified end to end at desk scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import TokenSequence, Vocab, decode


class UnsupportedFormatError(ValueError):
    """Not the PCM16 mono RIFF/WAVE this reader handles."""


class CorruptFileError(ValueError):
    """File ends before its declared payload does."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate: int = 16000

    def __post_init__(self):
        if self.samples.size == 0:
            raise ValueError("waveform must be non-empty")

    @property
    def duration_s(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass(frozen=True)
class ManifestEntry:
    audio: str
    text: str


def read_wav(path) -> Waveform:
    """Read a PCM 16-bit mono RIFF/WAVE file; samples scale to int16/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise UnsupportedFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (csize,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + csize]
        if len(body) < csize:
            raise CorruptFileError(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + csize + (csize & 1)
    if fmt is None or data is None:
        raise CorruptFileError(f"{path}: missing fmt/data chunk")
    audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if audio_format != 1 or bits != 16:
        raise UnsupportedFormatError(f"{path}: need PCM 16-bit, got format={audio_format} bits={bits}")
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: need mono, got {channels} channels")
    ints = np.frombuffer(data, dtype="<i2")
    return Waveform(ints.astype(np.float32) / 32768.0, sample_rate=rate)


def write_wav(path, wave: Waveform) -> None:
    """Write PCM16 mono. Quantization error is at most 1/32768 per sample."""
    q = np.clip(np.rint(wave.samples.astype(np.float64) * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    hdr = b"".join([
        b"RIFF", struct.pack("<I", 36 + len(payload)), b"WAVE",
        b"fmt ", struct.pack("<IHHIIHH", 16, 1, 1, wave.sample_rate,
                             wave.sample_rate * 2, 2, 16),
        b"data", struct.pack("<I", len(payload)),
    ])
    Path(path).write_bytes(hdr + payload)


@dataclass(frozen=True)
class SynthProfile:
    """Deterministic tone-coding recipe for the synthetic corpus.

    Token id t sounds as a pure tone at freq_base + freq_step * t unless
    remapped in `tone_overrides` (the lever for building shifted domains).
    """

    n_tokens: int
    freq_base: float = 300.0
    freq_step: float = 35.0
    tone_overrides: tuple[tuple[int, float], ...] = ()
    token_ms: int = 80
    gap_ms: int = 10
    amplitude: float = 0.3
    noise_sigma: float = 0.0
    seed: int = 0
    sample_rate: int = 16000
    tone_hz: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        overrides = dict(self.tone_overrides)
        freqs = tuple(
            overrides.get(t, self.freq_base + self.freq_step * t)
            for t in range(self.n_tokens)
        )
        object.__setattr__(self, "tone_hz", freqs)
        nyquist = self.sample_rate / 2
        bad = [f for f in freqs if f >= nyquist]
        if bad:
            raise ValueError(f"tone frequencies {bad} at or above Nyquist ({nyquist} Hz)")
        for ms, name in ((self.token_ms, "token_ms"), (self.gap_ms, "gap_ms")):
            if (ms * self.sample_rate) % 1000 != 0:
                raise ValueError(f"{name}={ms} is not a whole sample count at {self.sample_rate} Hz")

    @property
    def token_samples(self) -> int:
        return self.token_ms * self.sample_rate // 1000

    @property
    def gap_samples(self) -> int:
        return self.gap_ms * self.sample_rate // 1000


def synth_utterance(tokens: TokenSequence, profile: SynthProfile) -> Waveform:
    """Render tokens as tones; a pure function of (tokens, profile)."""
    if len(tokens) == 0:
        raise ValueError("cannot synthesize an empty token sequence")
    tok_n = profile.token_samples
    gap_n = profile.gap_samples
    total = len(tokens) * tok_n + (len(tokens) - 1) * gap_n
    out = np.zeros(total, dtype=np.float64)
    t = np.arange(tok_n) / profile.sample_rate
    pos = 0
    for k, tok in enumerate(tokens):
        f = profile.tone_hz[tok]
        out[pos:pos + tok_n] = profile.amplitude * np.sin(2 * np.pi * f * t)
        pos += tok_n + (gap_n if k < len(tokens) - 1 else 0)
    if profile.noise_sigma > 0:
        rng = np.random.default_rng([profile.seed, len(tokens), *[int(x) for x in tokens]])
        out += rng.normal(0.0, profile.noise_sigma, size=total)
    return Waveform(np.clip(out, -1.0, 1.0).astype(np.float32), profile.sample_rate)


def generate_corpus(vocab: Vocab, n_utts: int, len_range: tuple[int, int],
                    profile: SynthProfile, out_dir) -> list[ManifestEntry]:
    """Write `n_utts` WAVs plus a JSONL manifest; returns the entries.

    Token sequences are drawn uniformly over the character ids. Everything
    is a pure function of (profile.seed, parameters), so two runs produce
    byte-identical corpora.
    """
    lo, hi = len_range
    if not (1 <= lo <= hi <= 64):
        raise ValueError(f"len_range must satisfy 1 <= lo <= hi <= 64, got {len_range}")
    if profile.n_tokens != vocab.n_chars:
        raise ValueError(f"profile covers {profile.n_tokens} tokens but vocab has {vocab.n_chars} chars")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([profile.seed, 192])
    entries = []
    for i in range(n_utts):
        n = int(rng.integers(lo, hi + 1))
        tokens = [int(x) for x in rng.integers(0, vocab.n_chars, size=n)]
        wav = synth_utterance(tokens, profile)
        name = f"utt_{i:05d}.wav"
        write_wav(out_dir / name, wav)
        entries.append(ManifestEntry(audio=name, text=decode(tokens, vocab)))
    write_manifest(out_dir / "manifest.jsonl", entries)
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps({"audio": e.audio, "text": e.text}, ensure_ascii=False) + "\n")


def load_manifest(path) -> list[ManifestEntry]:
    """Load a JSONL manifest; audio paths are relative to the manifest."""
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            entries.append(ManifestEntry(audio=rec["audio"], text=rec["text"]))
    return entries


def resolve_audio(manifest_path, entry: ManifestEntry) -> Path:
    return Path(manifest_path).parent / entry.audio
