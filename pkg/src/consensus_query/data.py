"""Datasets of classifier outputs and expert votes: file format and generators.

File format (UTF-8, one JSON object per line)::

    {"format": "consensus-query", "version": 1, "K": 3, "M": 1, "H": 3, "meta": {...}}
    {"model_probs": [[0.7, 0.2, 0.1]], "expert_votes": [1, 1, 3], "segment": "low"}
    ...

The first line is a header.  Every following line is one example:
``model_probs`` holds M probability vectors of length K, ``expert_votes``
holds H class labels numbered 1..K, and ``segment`` is an optional string.
Blank lines are ignored.  Probabilities are written with 17 significant
digits so a save/load round trip is exact.  Inside the package labels are
0-based.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, NumericalError, ParseError, SchemaError
from .gaussian import cholesky
from .simplex import PROB_FLOOR, floor_probs, from_logits

FORMAT_NAME = "consensus-query"
FORMAT_VERSION = 1
SUM_TOL = 1e-6


@dataclass(frozen=True)
class ExampleRecord:
    """One example: M classifier probability vectors and H expert votes (0-based)."""

    model_probs: np.ndarray
    expert_votes: np.ndarray
    segment: str | None = None


@dataclass
class Dataset:
    """Examples stored column-wise.

    ``probs`` is (T, M, K), ``votes`` is (T, H) with 0-based labels and
    ``segments`` is a length-T list of optional tags.
    """

    K: int
    M: int
    H: int
    probs: np.ndarray
    votes: np.ndarray
    segments: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    # latent class per example when a generator knows it; never shown to policies
    true_class: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float).reshape(-1, self.M, self.K)
        self.votes = np.asarray(self.votes, dtype=np.int64).reshape(-1, self.H)
        T = self.probs.shape[0]
        if self.votes.shape[0] != T:
            raise SchemaError("probs and votes disagree on the number of examples")
        if not self.segments:
            self.segments = [None] * T
        if len(self.segments) != T:
            raise SchemaError("one segment tag per example is required")
        if self.K < 2 or self.M < 1 or self.H < 1:
            raise SchemaError("need K >= 2, M >= 1 and H >= 1")
        if T and (self.votes.min() < 0 or self.votes.max() >= self.K):
            raise SchemaError(f"votes must lie in 0..{self.K - 1} (0-based in memory)")

    def __len__(self):
        return self.probs.shape[0]

    def __getitem__(self, t):
        return ExampleRecord(self.probs[t], self.votes[t], self.segments[t])

    def __iter__(self):
        for t in range(len(self)):
            yield self[t]

    @property
    def records(self):
        return list(self)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.K, self.M, self.H, self.probs[idx], self.votes[idx],
            [self.segments[i] for i in idx], dict(self.meta),
        )

    @classmethod
    def from_records(cls, records, K, M, H, meta=None):
        records = list(records)
        probs = np.array([r.model_probs for r in records], dtype=float).reshape(len(records), M, K)
        votes = np.array([r.expert_votes for r in records], dtype=np.int64).reshape(len(records), H)
        return cls(K, M, H, probs, votes, [r.segment for r in records], dict(meta or {}))


def _fmt_probs(p):
    return "[" + ", ".join("[" + ", ".join(format(float(x), ".17g") for x in row) + "]" for row in p) + "]"


def dumps_record(probs, votes, segment=None):
    line = '{"model_probs": ' + _fmt_probs(probs) + ', "expert_votes": ' + json.dumps([int(v) + 1 for v in votes])
    if segment is not None:
        line += ', "segment": ' + json.dumps(segment)
    return line + "}"


def save_dataset(ds: Dataset, path):
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "K": ds.K, "M": ds.M, "H": ds.H}
    if ds.meta:
        header["meta"] = ds.meta
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for t in range(len(ds)):
            fh.write(dumps_record(ds.probs[t], ds.votes[t], ds.segments[t]) + "\n")


def _int_field(obj, key, lineno):
    v = obj.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ParseError(f"header field {key!r} must be an integer", line=lineno)
    return v


def _parse_header(obj, lineno):
    if not isinstance(obj, dict) or obj.get("format") != FORMAT_NAME:
        raise ParseError(f"first line must be a {FORMAT_NAME!r} header", line=lineno)
    if obj.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported format version {obj.get('version')!r}")
    K, M, H = (_int_field(obj, k, lineno) for k in ("K", "M", "H"))
    if K < 2 or M < 1 or H < 1:
        raise SchemaError("header needs K >= 2, M >= 1 and H >= 1")
    return K, M, H, obj.get("meta") or {}


def _parse_record(obj, lineno, K, M, H):
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", line=lineno)
    unknown = set(obj) - {"model_probs", "expert_votes", "segment"}
    if unknown:
        raise ParseError(f"unknown record keys {sorted(unknown)}", line=lineno)
    try:
        probs = np.array(obj["model_probs"], dtype=float)
        raw_votes = obj["expert_votes"]
    except KeyError as exc:
        raise ParseError(f"missing key {exc.args[0]!r}", line=lineno) from None
    except (TypeError, ValueError):
        raise ParseError("model_probs must be an array of numeric arrays", line=lineno) from None
    if not isinstance(raw_votes, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw_votes):
        raise ParseError("expert_votes must be an array of integers", line=lineno)
    segment = obj.get("segment")
    if segment is not None and not isinstance(segment, str):
        raise ParseError("segment must be a string", line=lineno)
    if probs.shape != (M, K):
        raise SchemaError(f"line {lineno}: model_probs has shape {probs.shape}, expected {(M, K)}")
    if len(raw_votes) != H:
        raise SchemaError(f"line {lineno}: expected {H} expert votes, got {len(raw_votes)}")
    votes = np.array(raw_votes, dtype=np.int64)
    if votes.min() < 1 or votes.max() > K:
        raise SchemaError(f"line {lineno}: votes must lie in 1..{K}")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > SUM_TOL):
        raise SchemaError(f"line {lineno}: model_probs rows must be probability vectors")
    return probs, votes - 1, segment


def load_dataset(path):
    """Read a dataset file, validating every line against the header."""
    path = Path(path)
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    header = None
    probs, votes, segments = [], [], []
    n_floored = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
        if header is None:
            header = _parse_header(obj, lineno)
            continue
        p, v, s = _parse_record(obj, lineno, *header[:3])
        p, raised = floor_probs(p)
        n_floored += raised
        probs.append(p)
        votes.append(v)
        segments.append(s)
    if header is None:
        raise ParseError("empty file: missing header", line=1)
    if n_floored:
        warnings.warn(
            f"{n_floored} record(s) had probabilities below {PROB_FLOOR:g}; they were floored and renormalised",
            stacklevel=2,
        )
    K, M, H, meta = header
    meta = dict(meta)
    meta.setdefault("source_sha256", hashlib.sha256(raw).hexdigest())
    return Dataset(K, M, H, np.array(probs).reshape(-1, M, K), np.array(votes, dtype=np.int64).reshape(-1, H), segments, meta)


# ---------------------------------------------------------------- generators


def gen_equicorr_voters(H, rho, T, classifier_corr, rng, segment=None):
    """Binary panel with equicorrelated Gaussian logits thresholded at zero.

    Experts share pairwise correlation ``rho``; the single classifier's
    logit has correlation ``classifier_corr`` with every expert.  A positive
    logit means a vote for the first class, and the classifier's
    probabilities are ``from_logits`` of its coordinate.
    """
    if not 0 <= rho < 1:
        raise DomainError("rho must lie in [0, 1)")
    cov = np.full((H + 1, H + 1), float(rho))
    cov[H, :] = cov[:, H] = classifier_corr
    np.fill_diagonal(cov, 1.0)
    try:
        L = cholesky(cov)
    except NumericalError as exc:
        raise DomainError("the voter correlation matrix is not positive definite") from exc
    z = rng.standard_normal((T, H + 1)) @ L.T
    votes = (z[:, :H] <= 0).astype(np.int64)
    probs = from_logits(z[:, H:])[:, None, :]
    probs, _ = floor_probs(probs)
    meta = {"generator": "equicorr", "H": H, "rho": rho, "T": T, "classifier_corr": classifier_corr}
    return Dataset(2, 1, H, probs, votes, [segment] * T, meta)


def _wrong_class(true, K, rng):
    # uniform over the K-1 classes other than ``true``
    off = rng.integers(1, K, size=np.shape(true))
    return (true + off) % K


def gen_classwise_experts(K, H, per_expert_class_accuracy, classifier_class_accuracy, confidence_sharpness, T,
                          class_prior, rng, segment=None):
    """Panel whose experts and classifier have class-dependent accuracy.

    Each example draws a latent class from ``class_prior``.  Expert h votes
    for it with probability ``per_expert_class_accuracy[h, class]`` and
    otherwise for a uniformly chosen wrong class.  The classifier picks its
    target the same way (with ``classifier_class_accuracy``) and emits a
    Dirichlet draw whose largest entry is moved onto the target, so its
    argmax is the target; ``confidence_sharpness`` is the extra Dirichlet
    concentration on that entry.
    """
    acc = np.asarray(per_expert_class_accuracy, dtype=float)
    cacc = np.asarray(classifier_class_accuracy, dtype=float)
    prior = np.asarray(class_prior, dtype=float)
    if acc.shape != (H, K) or cacc.shape != (K,) or prior.shape != (K,):
        raise DomainError("accuracy matrices must be H x K and K, class prior of length K")
    if np.any(acc <= 0) or np.any(acc > 1) or np.any(cacc <= 0) or np.any(cacc > 1):
        raise DomainError("accuracies must lie in (0, 1]")
    if np.any(prior < 0) or abs(prior.sum() - 1) > 1e-9:
        raise DomainError("class_prior must be a probability vector")
    if confidence_sharpness <= 0:
        raise DomainError("confidence_sharpness must be positive")
    true = rng.choice(K, size=T, p=prior)
    correct = rng.random((T, H)) < acc[:, true].T
    votes = np.where(correct, true[:, None], _wrong_class(true[:, None], K, rng))
    target = np.where(rng.random(T) < cacc[true], true, _wrong_class(true, K, rng))
    alpha = np.ones((T, K))
    alpha[np.arange(T), target] += confidence_sharpness
    p = rng.gamma(alpha)
    p /= p.sum(axis=1, keepdims=True)
    top = p.argmax(axis=1)
    rows = np.arange(T)
    p[rows, top], p[rows, target] = p[rows, target], p[rows, top]
    probs, _ = floor_probs(p[:, None, :])
    meta = {
        "generator": "classwise", "K": K, "H": H, "T": T,
        "per_expert_class_accuracy": acc.tolist(), "classifier_class_accuracy": cacc.tolist(),
        "confidence_sharpness": confidence_sharpness, "class_prior": prior.tolist(),
    }
    return Dataset(K, 1, H, probs, votes.astype(np.int64), [segment] * T, meta, true_class=true)


def concat_shift(a: Dataset, b: Dataset):
    """Records of ``a`` followed by those of ``b``, keeping segment tags."""
    if (a.K, a.M, a.H) != (b.K, b.M, b.H):
        raise SchemaError(f"cannot concatenate K,M,H={a.K, a.M, a.H} with {b.K, b.M, b.H}")
    meta = {"generator": "concat", "parts": [a.meta, b.meta]}
    return Dataset(
        a.K, a.M, a.H, np.concatenate([a.probs, b.probs]), np.concatenate([a.votes, b.votes]),
        list(a.segments) + list(b.segments), meta,
    )


# Class-wise accuracy profiles of three-class, three-expert panels.
CIFAR_LIKE = {
    "experts": [[1.0, 0.789, 0.998], [0.997, 0.997, 0.755], [0.695, 0.996, 0.999]],
    "classifier": [0.82, 0.956, 0.956],
    "prior": [0.3, 0.3, 0.4],
}
LOW_NOISE = {
    "experts": [[1.0, 1.0, 1.0], [1.0, 1.0, 0.86], [0.807, 1.0, 1.0]],
    "classifier": [0.853, 1.0, 0.888],
    "prior": [6 / 16, 5 / 16, 5 / 16],
}
HIGH_NOISE = {
    "experts": [[1.0, 0.444, 1.0], [0.995, 1.0, 0.577], [0.35, 0.888, 1.0]],
    "classifier": [0.788, 0.444, 0.824],
    "prior": [6 / 16, 5 / 16, 5 / 16],
}
DEFAULT_SHARPNESS = 4.0


def _from_profile(profile, T, rng, sharpness, segment=None):
    return gen_classwise_experts(
        3, 3, profile["experts"], profile["classifier"], sharpness, T, profile["prior"], rng, segment=segment,
    )


def preset_classwise(T, rng, sharpness=DEFAULT_SHARPNESS):
    """Three experts with two strong classes each and one weak class, rotated."""
    return _from_profile(CIFAR_LIKE, T, rng, sharpness)


def preset_shift(T_each, rng, sharpness=DEFAULT_SHARPNESS):
    """A low-noise block followed by a high-noise block of the same panel."""
    a = _from_profile(LOW_NOISE, T_each, rng, sharpness, segment="low")
    b = _from_profile(HIGH_NOISE, T_each, rng, sharpness, segment="high")
    return concat_shift(a, b)
