"""Corpus-level evaluation of a checkpoint: noisy vs enhanced at chosen SNRs."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import load_row, read_manifest
from .metrics import lsd, si_sdr, stoi
from .trainer import load_session, session_enhance

CSV_HEADER = ["utterance", "snr_db", "condition", "stoi", "sisdr_db", "lsd_db"]
CONDITIONS = ("noisy", "enhanced")


@dataclass
class EvalReport:
    rows: list[dict]
    example: dict = field(default_factory=dict)  # log-mel images of the first utterance

    def median(self, snr_db: float, condition: str, metric: str) -> float:
        values = [r[metric] for r in self.rows if r["snr_db"] == snr_db and r["condition"] == condition]
        return float(np.median(values)) if values else float("nan")

    @property
    def snrs(self) -> list[float]:
        return sorted({r["snr_db"] for r in self.rows})

    def improvement(self, snr_db: float, metric: str) -> float:
        """Median of per-utterance (enhanced - noisy) differences."""
        noisy = {r["utterance"]: r[metric] for r in self.rows
                 if r["snr_db"] == snr_db and r["condition"] == "noisy"}
        deltas = [r[metric] - noisy[r["utterance"]] for r in self.rows
                  if r["snr_db"] == snr_db and r["condition"] == "enhanced"]
        return float(np.median(deltas)) if deltas else float("nan")

    def summary(self) -> list[dict]:
        out = []
        for snr in self.snrs:
            for cond in CONDITIONS:
                out.append({"snr_db": snr, "condition": cond,
                            **{m: self.median(snr, cond, m) for m in ("stoi", "sisdr_db", "lsd_db")}})
        return out

    def summary_lines(self) -> list[str]:
        lines = ["snr_db  condition  median_stoi(x100)  median_sisdr_db  median_lsd_db"]
        for s in self.summary():
            lines.append(f"{s['snr_db']:>6g}  {s['condition']:<9}  {100 * s['stoi']:17.1f}  "
                         f"{s['sisdr_db']:15.2f}  {s['lsd_db']:13.2f}")
        for snr in self.snrs:
            lines.append(f"{snr:>6g}  improvement  stoi {self.improvement(snr, 'stoi'):+.3f}  "
                         f"sisdr {self.improvement(snr, 'sisdr_db'):+.2f} dB")
        return lines

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in self.rows:
                writer.writerow([r["utterance"], f"{r['snr_db']:g}", r["condition"],
                                 f"{r['stoi']:.6f}", f"{r['sisdr_db']:.4f}", f"{r['lsd_db']:.4f}"])
        return path


def _magnitudes(samples: np.ndarray, count: int) -> np.ndarray:
    return np.abs(dsp.segment_spectrogram(samples, count))


def evaluate(checkpoint, manifest, snrs=(-5.0, 0.0), seed: int | None = None,
             limit: int | None = None) -> EvalReport:
    """Mix every manifest utterance at each SNR, enhance, and score both signals.

    ``seed`` only matters for generators with latent noise channels.
    """
    session = load_session(checkpoint)
    if seed is not None:
        session.config = dataclasses.replace(session.config, seed=seed)
    if not isinstance(manifest, dict):
        manifest = read_manifest(manifest)
    rows_in = manifest["rows"] if limit is None else manifest["rows"][:limit]
    rows, example = [], {}
    for row in rows_in:
        utt = load_row(row, manifest.get("_root"))
        for snr in snrs:
            noisy = dsp.mix_at_snr(utt.clean, utt.noise, float(snr)).samples
            enhanced = session_enhance(session, noisy, utt.frames).samples
            n = len(enhanced)
            count = n // dsp.SEGMENT_SAMPLES
            clean = utt.clean[:n]
            clean_mag = _magnitudes(clean, count)
            signals = {"noisy": noisy[:n], "enhanced": enhanced}
            for cond in CONDITIONS:
                est = signals[cond]
                rows.append({
                    "utterance": utt.name, "snr_db": float(snr), "condition": cond,
                    "stoi": stoi(clean, est), "sisdr_db": si_sdr(clean, est),
                    "lsd_db": lsd(clean_mag, _magnitudes(est, count)),
                })
            if not example:
                example = {"name": utt.name, "snr_db": float(snr),
                           **{k: dsp.log_mel_spectrogram(_magnitudes(v, count))
                              for k, v in (("clean", clean), *signals.items())}}
    return EvalReport(rows, example)
