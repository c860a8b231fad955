"""Staged dataset filtering: text-image consistency, aesthetics, edge clarity.

Records flow through the three stages in a fixed order and stop at the first
failure.  Every stage is scored by a pluggable scorer: a builtin deterministic
stub, an external command speaking JSONL over stdin/stdout, or (for library
use) a Python callable.  The builtin stubs are stand-ins with no claim of
semantic fidelity.
"""
from __future__ import annotations

import json
import logging
import math
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .tokenizer import text_bucket

log = logging.getLogger(__name__)

STAGES = ("consistency", "aesthetic", "canny")
DEFAULT_THRESHOLDS = {"consistency": 30.0, "aesthetic": 7.0, "canny": 0.67}
HIST_BUCKETS = 16
GRAD_BINS = 64


class ScorerError(RuntimeError):
    pass


@dataclass
class ScorerBinding:
    stage: str
    mode: str = "builtin"
    threshold: float | None = None
    command: str | list | None = None
    func: object = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.mode not in ("builtin", "command", "callable"):
            raise ValueError(f"unknown scorer mode {self.mode!r}")
        if self.threshold is None:
            self.threshold = DEFAULT_THRESHOLDS[self.stage]
        self.threshold = float(self.threshold)
        if not math.isfinite(self.threshold):
            raise ValueError(f"{self.stage}: threshold must be finite")
        if self.mode == "command" and not self.command:
            raise ValueError(f"{self.stage}: command mode needs a command")
        if self.mode == "callable" and not callable(self.func):
            raise ValueError(f"{self.stage}: callable mode needs func")

    def passes(self, score):
        return score >= self.threshold


def default_bindings():
    return [ScorerBinding(s) for s in STAGES]


@dataclass
class CurationRecord:
    id: str
    image_path: str
    prompt: str
    scores: dict = field(default_factory=dict)
    decisions: dict = field(default_factory=dict)
    final: str = "pending"
    rejected_stage: str | None = None
    error: str | None = None

    def to_json(self):
        out = {
            "id": self.id,
            "image_path": self.image_path,
            "prompt": self.prompt,
            "scores": self.scores,
            "decisions": self.decisions,
            "final": self.final,
        }
        if self.rejected_stage is not None:
            out["rejected_stage"] = self.rejected_stage
        if self.error is not None:
            out["error"] = self.error
        return json.dumps(out, sort_keys=True)


# ---------------------------------------------------------------- builtin stubs

def _image(record, base_dir=None):
    path = Path(record.image_path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return imaging.read_png(path)


def consistency_stub(img, prompt):
    """100 x fraction of prompt words whose hash bucket is a well-populated luma bin."""
    words = prompt.split()
    if not words:
        return 0.0
    hist, _ = np.histogram(imaging.to_luma(img), bins=HIST_BUCKETS, range=(0.0, 1.0))
    mass = hist / hist.sum()
    credit = [min(1.0, HIST_BUCKETS * mass[text_bucket(w, HIST_BUCKETS)]) for w in words]
    return 100.0 * float(np.mean(credit))


def aesthetic_stub(img):
    """0-10 pseudo-score from luma contrast and edge density."""
    luma = imaging.to_luma(img)
    edges = imaging.canny(img)
    return 5.0 * min(1.0, 2.0 * float(luma.std())) + 5.0 * min(1.0, 10.0 * float(edges.mean()))


def dilate(edges):
    e = np.pad(np.asarray(edges, dtype=bool), 1)
    h, w = np.asarray(edges).shape
    out = np.zeros((h, w), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            out |= e[dy:dy + h, dx:dx + w]
    return out.astype(np.uint8)


def _grad_hist(plane):
    mag, _ = imaging.canny_gradients(plane)
    nz = mag[mag > 0]
    hist, _ = np.histogram(np.minimum(nz, 255.999), bins=GRAD_BINS, range=(0.0, 256.0))
    return hist.astype(np.float64)


def canny_similarity_stub(img):
    """Cosine similarity of nonzero gradient-magnitude histograms: image vs. dilated edges.

    A zero histogram (no gradient anywhere) scores 0.
    """
    edges = imaging.canny(img)
    a = _grad_hist(imaging.to_luma(img))
    b = _grad_hist(dilate(edges).astype(np.float64))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def builtin_score(stage, record, base_dir=None):
    img = _image(record, base_dir)
    if stage == "consistency":
        return consistency_stub(img, record.prompt)
    if stage == "aesthetic":
        return aesthetic_stub(img)
    return canny_similarity_stub(img)


def score_consistency(record, binding=None, base_dir=None):
    return _score_one(binding or ScorerBinding("consistency"), record, base_dir)


def score_aesthetic(record, binding=None, base_dir=None):
    return _score_one(binding or ScorerBinding("aesthetic"), record, base_dir)


def score_canny_similarity(record, binding=None, base_dir=None):
    return _score_one(binding or ScorerBinding("canny"), record, base_dir)


def _score_one(binding, record, base_dir=None):
    if binding.mode == "builtin":
        return builtin_score(binding.stage, record, base_dir)
    if binding.mode == "callable":
        return float(binding.func(record))
    return run_command(binding.command, [record])[record.id]


# ---------------------------------------------------------------- external scorers

def run_command(command, records):
    """Send records as JSONL to ``command`` and read back ``{id: score}``."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    payload = "".join(
        json.dumps({"id": r.id, "image_path": r.image_path, "prompt": r.prompt}) + "\n" for r in records
    )
    proc = subprocess.run(argv, input=payload, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ScorerError(f"scorer exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
    scores = {}
    for line in proc.stdout.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        scores[str(obj["id"])] = float(obj["score"])
    return scores


# ---------------------------------------------------------------- pipeline

def parse_manifest(lines):
    """Parse JSONL lines into records; malformed lines become errored records."""
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = CurationRecord(str(obj["id"]), str(obj["image_path"]), str(obj.get("prompt", "")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            rec = CurationRecord(f"line-{lineno}", "", "", final="errored",
                                 error=f"malformed manifest line {lineno}: {exc}")
        records.append(rec)
    return records


def _score_stage(binding, records, parallelism, base_dir):
    """Score or exception per record, aligned with ``records``."""
    if binding.mode == "command":
        try:
            scores = run_command(binding.command, records)
        except (ScorerError, OSError, ValueError, KeyError) as exc:
            return [exc] * len(records)
        return [scores.get(r.id, ScorerError("scorer returned no score")) for r in records]

    def one(rec):
        try:
            return _score_one(binding, rec, base_dir)
        except Exception as exc:  # unreadable image or failing scorer
            return exc

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(one, records))
    return [one(r) for r in records]


def run_pipeline(records, bindings=None, parallelism=1, base_dir=None):
    """Run the stages in order, short-circuiting on failure.

    Returns ``(records, summary)``; records keep their input order.
    """
    by_stage = {b.stage: b for b in (bindings or default_bindings())}
    missing = [s for s in STAGES if s not in by_stage]
    if missing:
        raise ValueError(f"no scorer bound for stages {missing}")
    alive = [r for r in records if r.final == "pending"]
    for stage in STAGES:
        binding = by_stage[stage]
        if not alive:
            break
        results = _score_stage(binding, alive, max(1, int(parallelism)), base_dir)
        survivors = []
        for rec, score in zip(alive, results):
            if isinstance(score, Exception) or not math.isfinite(score):
                rec.final = "errored"
                rec.error = f"{stage}: {score}" if isinstance(score, Exception) else f"{stage}: non-finite score"
                continue
            rec.scores[stage] = float(score)
            rec.decisions[stage] = "pass" if binding.passes(score) else "fail"
            if rec.decisions[stage] == "pass":
                survivors.append(rec)
            else:
                rec.final = "rejected"
                rec.rejected_stage = stage
        alive = survivors
    for rec in alive:
        rec.final = "kept"
    return records, summarize(records)


def summarize(records):
    return {
        "input_count": len(records),
        "kept": sum(r.final == "kept" for r in records),
        "rejected_by_stage": {s: sum(r.rejected_stage == s for r in records) for s in STAGES},
        "errored": sum(r.final == "errored" for r in records),
    }


def curate_files(input_path, output_path, summary_path=None, bindings=None, parallelism=1):
    """File-level entry point: JSONL in, JSONL (+ summary JSON) out."""
    input_path = Path(input_path)
    records = parse_manifest(input_path.read_text(encoding="utf-8").splitlines())
    records, summary = run_pipeline(records, bindings, parallelism, base_dir=input_path.parent)
    Path(output_path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")
    if summary_path is not None:
        Path(summary_path).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    log.info("curated %d records: %d kept", summary["input_count"], summary["kept"])
    return summary
