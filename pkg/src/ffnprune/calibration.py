"""Single-pass calibration: streaming block-transformation and channel statistics.

One forward pass per calibration sequence feeds an observer that accumulates,
per block, the per-token distance between the residual stream entering and
leaving the block (angular, cosine and euclidean variants side by side), the
squared per-channel sums of the FFN intermediate activation, and the squared
sums of the FFN input hidden state. No sequence's trace is ever retained;
the observer sees buffers only while the forward pass holds them live.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, ValidationError
from .model import ModelCheckpoint, forward
from .tensor import F64

DEGENERATE_NORM = 1e-12

SUMMARY_NAME = "summary.json"
SUMMARY_BLOB = "summary.bin"


@dataclass
class CalibrationSet:
    sequences: list[np.ndarray]
    seed: int
    seq_len: int


@dataclass
class ActivationSummary:
    """Streaming statistics for one block."""

    d_ff: int
    d_model: int
    token_count: int = 0
    angular_sum: float = 0.0
    cosine_sum: float = 0.0
    euclidean_sum: float = 0.0
    channel_sq_sum: np.ndarray = None  # float64 (d_ff,)
    ffn_input_sq_sum: np.ndarray = None  # float64 (d_model,)

    def __post_init__(self):
        if self.channel_sq_sum is None:
            self.channel_sq_sum = np.zeros(self.d_ff, dtype=F64)
        if self.ffn_input_sq_sum is None:
            self.ffn_input_sq_sum = np.zeros(self.d_model, dtype=F64)

    @property
    def mean_angular(self) -> float:
        return self.angular_sum / self.token_count

    def channel_norms(self) -> np.ndarray:
        return np.sqrt(self.channel_sq_sum)

    def ffn_input_norms(self) -> np.ndarray:
        return np.sqrt(self.ffn_input_sq_sum)


def sample_calibration(corpus_tokens: np.ndarray, n_samples: int, seq_len: int,
                       seed: int) -> CalibrationSet:
    """n_samples non-overlapping seq_len windows, chosen by a seeded generator."""
    if n_samples < 1 or seq_len < 1:
        raise ConfigError("n_samples and seq_len must be >= 1")
    n_windows = corpus_tokens.shape[0] // seq_len
    if n_windows < n_samples:
        raise CapacityError(
            f"corpus holds {corpus_tokens.shape[0]} tokens = {n_windows} windows of "
            f"{seq_len}; need {n_samples}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(n_windows, size=n_samples, replace=False)
    seqs = [corpus_tokens[int(w) * seq_len:(int(w) + 1) * seq_len].copy() for w in picks]
    return CalibrationSet(sequences=seqs, seed=seed, seq_len=seq_len)


def _blank(model: ModelCheckpoint) -> list[ActivationSummary]:
    cfg = model.config
    return [ActivationSummary(d_ff=int(f), d_model=cfg.d_model)
            for f in cfg.d_ff_per_block]


def _token_distances(x_in: np.ndarray, x_out: np.ndarray):
    """Per-token angular / cosine-dissimilarity / euclidean distances, float64.

    The angle uses 2*atan2(|u-v|, |u+v|) on normalized rows, which is exact at
    the identical/opposite/orthogonal boundary cases where arccos rounds.
    Zero-norm vectors carry no transformation signal: their angular and cosine
    distances are defined as 0.
    """
    a = x_in.astype(F64, copy=False)
    b = x_out.astype(F64, copy=False)
    dots = np.sum(a * b, axis=1)
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    ok = (na > DEGENERATE_NORM) & (nb > DEGENERATE_NORM)
    safe_na = np.where(ok, na, 1.0)
    safe_nb = np.where(ok, nb, 1.0)
    ua = a / safe_na[:, None]
    ub = b / safe_nb[:, None]
    diff = np.sqrt(np.sum((ua - ub) ** 2, axis=1))
    summ = np.sqrt(np.sum((ua + ub) ** 2, axis=1))
    angular = np.where(ok, 2.0 * np.arctan2(diff, summ) / np.pi, 0.0)
    cos = np.clip(np.where(ok, dots / (safe_na * safe_nb), 0.0), -1.0, 1.0)
    cosine = np.where(ok, 1.0 - cos, 0.0)
    euclid = np.sqrt(np.sum((a - b) ** 2, axis=1))
    return angular, cosine, euclid


def _collect_one(model: ModelCheckpoint, seq: np.ndarray) -> list[ActivationSummary]:
    partial = _blank(model)

    def observe(li, x_in, x_out, ffn_in, inter):
        s = partial[li]
        ang, cosd, euc = _token_distances(x_in, x_out)
        s.token_count += x_in.shape[0]
        s.angular_sum += float(np.sum(ang))
        s.cosine_sum += float(np.sum(cosd))
        s.euclidean_sum += float(np.sum(euc))
        inter64 = inter.astype(F64, copy=False)
        s.channel_sq_sum += np.sum(inter64 * inter64, axis=0)
        fin64 = ffn_in.astype(F64, copy=False)
        s.ffn_input_sq_sum += np.sum(fin64 * fin64, axis=0)

    forward(model, seq, observer=observe)
    return partial


def merge_summaries(a: list[ActivationSummary],
                    b: list[ActivationSummary]) -> list[ActivationSummary]:
    if len(a) != len(b):
        raise ValidationError("summaries cover different block counts")
    out = []
    for sa, sb in zip(a, b):
        out.append(ActivationSummary(
            d_ff=sa.d_ff, d_model=sa.d_model,
            token_count=sa.token_count + sb.token_count,
            angular_sum=sa.angular_sum + sb.angular_sum,
            cosine_sum=sa.cosine_sum + sb.cosine_sum,
            euclidean_sum=sa.euclidean_sum + sb.euclidean_sum,
            channel_sq_sum=sa.channel_sq_sum + sb.channel_sq_sum,
            ffn_input_sq_sum=sa.ffn_input_sq_sum + sb.ffn_input_sq_sum))
    return out


def _tree_merge(partials: list[list[ActivationSummary]]) -> list[ActivationSummary]:
    # Fixed binary merge tree over sequence index: identical results whether
    # partials were produced serially or by a worker pool.
    level = list(partials)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(merge_summaries(level[i], level[i + 1]))
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def collect_summaries(model: ModelCheckpoint, calib: CalibrationSet,
                      threads: int = 1) -> list[ActivationSummary]:
    """One forward pass per sequence; partial summaries merged in a fixed tree."""
    if not calib.sequences:
        raise CapacityError("calibration set is empty")
    if threads <= 1:
        partials = [_collect_one(model, seq) for seq in calib.sequences]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(lambda s: _collect_one(model, s), calib.sequences))
    return _tree_merge(partials)


def save_summary(summaries: list[ActivationSummary], path: str,
                 provenance: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    table = []
    offset = 0
    blobs = []
    for i, s in enumerate(summaries):
        for field_name, vec in (("channel_sq_sum", s.channel_sq_sum),
                                ("ffn_input_sq_sum", s.ffn_input_sq_sum)):
            buf = vec.astype("<f8").tobytes()
            table.append({"name": f"block{i}.{field_name}", "count": int(vec.shape[0]),
                          "byte_offset": offset, "byte_len": len(buf)})
            blobs.append(buf)
            offset += len(buf)
    meta = {
        "format_version": 1,
        "n_blocks": len(summaries),
        "token_count": summaries[0].token_count if summaries else 0,
        "blocks": [
            {"d_ff": s.d_ff, "d_model": s.d_model, "token_count": s.token_count,
             "angular_sum": s.angular_sum, "cosine_sum": s.cosine_sum,
             "euclidean_sum": s.euclidean_sum}
            for s in summaries
        ],
        "vectors": table,
        "provenance": provenance or {},
    }
    with open(os.path.join(path, SUMMARY_BLOB), "wb") as fh:
        for buf in blobs:
            fh.write(buf)
    with open(os.path.join(path, SUMMARY_NAME), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_summary(path: str) -> list[ActivationSummary]:
    jpath, bpath = os.path.join(path, SUMMARY_NAME), os.path.join(path, SUMMARY_BLOB)
    if not os.path.exists(jpath) or not os.path.exists(bpath):
        raise ValidationError(f"{path} is not a summary directory")
    with open(jpath, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != 1:
        raise ValidationError(f"unknown summary format_version {meta.get('format_version')!r}")
    blob = np.fromfile(bpath, dtype=np.uint8)
    vectors = {}
    for entry in meta["vectors"]:
        off, ln = int(entry["byte_offset"]), int(entry["byte_len"])
        if off + ln > blob.shape[0]:
            raise ValidationError(f"summary blob truncated inside {entry['name']}")
        vectors[entry["name"]] = blob[off:off + ln].view("<f8").astype(F64)
    out = []
    for i, b in enumerate(meta["blocks"]):
        out.append(ActivationSummary(
            d_ff=int(b["d_ff"]), d_model=int(b["d_model"]),
            token_count=int(b["token_count"]),
            angular_sum=float(b["angular_sum"]), cosine_sum=float(b["cosine_sum"]),
            euclidean_sum=float(b["euclidean_sum"]),
            channel_sq_sum=vectors[f"block{i}.channel_sq_sum"],
            ffn_input_sq_sum=vectors[f"block{i}.ffn_input_sq_sum"]))
    return out


def summary_digest(path: str) -> str:
    h = hashlib.sha256()
    for n in (SUMMARY_NAME, SUMMARY_BLOB):
        p = os.path.join(path, n)
        if os.path.exists(p):
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
