"""Offline analyses: gradient spectra, per-row conflict, drift coordinates, run summaries."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .autograd import backward, no_grad
from .tasks import ActionBatch, PretrainBatch, pretrain_ce

SUMMARY_COLUMNS = ("throttle", "energy_shed", "avg_cos", "avg_alpha", "ot_penalty", "preclip_norm")


# ---------------------------------------------------------------------------
# one-sided Jacobi SVD
# ---------------------------------------------------------------------------
def _round_robin(n: int) -> List[np.ndarray]:
    """n-1 rounds of n/2 disjoint column pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        rounds.append(np.array([(players[i], players[n - 1 - i]) for i in range(n // 2)]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(G, tol: float = 1e-15, max_sweeps: int = 60, vectors: bool = False):
    """Singular values (descending) of ``G`` by Hestenes one-sided Jacobi.

    Columns are orthogonalised pairwise by plane rotations; each sweep applies
    all pairs of a round-robin schedule, a round at a time, vectorised over the
    disjoint pairs of that round.  On convergence the column norms are the
    singular values.  With ``vectors=True`` the right singular vectors are
    returned as well (columns of ``V``).
    """
    A = np.array(G, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    transposed = A.shape[1] > A.shape[0]
    if transposed:
        A = A.T.copy()
    n = A.shape[1]
    n_pad = n + (n % 2)
    if n_pad != n:
        A = np.concatenate([A, np.zeros((A.shape[0], 1))], axis=1)
    V = np.eye(n_pad)
    rounds = _round_robin(n_pad) if n_pad > 1 else []
    for _ in range(max_sweeps):
        rotated = False
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            ap, aq = A[:, p], A[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not act.any():
                continue
            rotated = True
            p, q, alpha, beta, gamma = p[act], q[act], alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = A[:, p], A[:, q]
            A[:, p] = c * ap - s * aq
            A[:, q] = s * ap + c * aq
            vp, vq = V[:, p], V[:, q]
            V[:, p] = c * vp - s * vq
            V[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise RuntimeError("Jacobi SVD did not converge")
    sigma = np.sqrt(np.einsum("ij,ij->j", A, A))[:n]
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    if not vectors:
        return sigma
    if transposed:
        # G.T = U S V^T, so the right vectors of G are the normalised columns of A
        with np.errstate(invalid="ignore", divide="ignore"):
            Vr = np.where(sigma > 0, A[:, :n][:, order] / sigma, 0.0)
    else:
        Vr = V[:n, :n][:, order]
    return sigma, Vr


@dataclass
class SpectrumResult:
    sigma: np.ndarray
    kappa: Dict[int, float] = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.sigma))

    @property
    def energy(self) -> float:
        return float(np.sum(self.sigma ** 2))

    def kappa_at(self, k: int) -> float:
        """Fraction of squared singular mass in the top ``k`` directions."""
        if k < 1:
            raise ValueError("k must be >= 1")
        e = self.sigma ** 2
        total = e.sum()
        if total == 0:
            raise ValueError("zero matrix: spectral ratio undefined")
        if k >= self.rank:
            return 1.0
        return float(e[:k].sum() / total)


def svd_spectrum(G, ks: Iterable[int] = (1, 3, 20)) -> SpectrumResult:
    res = SpectrumResult(jacobi_svd(G))
    res.kappa = {int(k): res.kappa_at(k) for k in ks}
    return res


# ---------------------------------------------------------------------------
# spectral asymmetry
# ---------------------------------------------------------------------------
def _param(store, name: str):
    try:
        p = store[name]
    except KeyError:
        raise KeyError(f"parameter {name!r} not found") from None
    if p.ndim != 2:
        raise ValueError(f"parameter {name!r} is not a matrix (shape {p.shape})")
    return p


def _grad_of(store, name: str, loss) -> np.ndarray:
    store.zero_grads()
    backward(loss)
    g = store.grad(name).copy()
    store.zero_grads()
    return g


def spectral_asymmetry(learner, ce_batch: PretrainBatch, mse_batch: ActionBatch, layer_name: str,
                       k: int = 20, noise=None):
    """``(kappa_k of the CE gradient, kappa_k of the flow-matching gradient)`` at one matrix.

    Both gradients are taken at the learner's current parameters.  ``noise``
    fixes the flow-matching draw; by default step 0 of the learner's stream.
    """
    store = learner.store
    _param(store, layer_name)
    g_ce = _grad_of(store, layer_name, pretrain_ce(learner.model, ce_batch))
    b = mse_batch.trimmed()
    noise = learner.noise(0, 0, b) if noise is None else noise
    _, raw, _, _ = learner.fm_forward(b, noise)
    g_mse = _grad_of(store, layer_name, raw)
    return svd_spectrum(g_ce, (k,)).kappa[k], svd_spectrum(g_mse, (k,)).kappa[k]


def down_proj_names(num_layers: int) -> List[str]:
    return [f"llm.layers.{i}.mlp.down_proj.weight" for i in range(num_layers)]


# ---------------------------------------------------------------------------
# per-row conflict
# ---------------------------------------------------------------------------
@dataclass
class ConflictHistogram:
    cosines: np.ndarray
    rows: np.ndarray
    counts: np.ndarray
    edges: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "cos"])
            for r, c in zip(self.rows, self.cosines):
                w.writerow([int(r), repr(float(c))])


def neuron_conflict_histogram(task_grad, ot_grad, bins: int = 20, eps: float = 1e-12) -> ConflictHistogram:
    """Cosine between task and OT gradients per output row of a weight matrix.

    Rows where both gradients are (near) zero carry no signal and are dropped;
    a row where exactly one gradient vanishes counts as orthogonal.
    """
    t = np.asarray(task_grad, dtype=np.float64)
    o = np.asarray(ot_grad, dtype=np.float64)
    if t.shape != o.shape or t.ndim != 2:
        raise ValueError(f"expected two matrices of one shape, got {t.shape} and {o.shape}")
    nt = np.linalg.norm(t, axis=1)
    no = np.linalg.norm(o, axis=1)
    keep = ~((nt < eps) & (no < eps))
    dot = np.einsum("ij,ij->i", t, o)
    denom = nt * no
    cos = np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)
    cos = np.clip(cos, -1.0, 1.0)[keep]
    counts, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    return ConflictHistogram(cos, np.flatnonzero(keep), counts, edges)


def conflict_at(learner, anchor, param: str, step: int = 1, bins: int = 20) -> ConflictHistogram:
    """Dual-backward on one micro-batch and histogram the per-row conflict of ``param``."""
    from .isolation import dual_backward
    from .transport import TransportConfig, total_penalty

    cfg = learner.cfg
    _param(learner.store, param)
    b = learner.micro_batches(step)[0].trimmed()
    l_fm, _, out, mask = learner.fm_forward(b, learner.noise(step, 0, b), capture=True)
    l_ot, _ = total_penalty(out.hidden, mask, anchor,
                            TransportConfig(cfg.ot_eps, cfg.ot_normalization, cfg.ot_scale))
    dual_backward(l_fm, l_ot, learner.store, learner.vlm_names)
    hist = neuron_conflict_histogram(learner.store.slot("task", param),
                                     learner.store.slot("ot", param), bins)
    learner.store.clear_slots()
    return hist


# ---------------------------------------------------------------------------
# manifold drift
# ---------------------------------------------------------------------------
def pooled_states(model, batch) -> np.ndarray:
    """Mask-averaged output of the last transformer block, one row per sample."""
    b = batch.trimmed()
    with no_grad():
        out = model(b.tokens, b.obs, b.mask, capture=True, compute_logits=False)
    H = out.hidden[-1].data
    M = np.asarray(b.mask, dtype=np.float64)[..., None]
    return (H * M).sum(axis=1) / M.sum(axis=1)


@dataclass
class DriftProjection:
    axis1: np.ndarray
    axis2: np.ndarray
    coords: Dict[str, np.ndarray]
    drift_norm: float

    def mean(self, label: str) -> np.ndarray:
        return self.coords[label].mean(axis=0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["set", "index", "drift_axis", "pc_axis"])
            for label, xy in self.coords.items():
                for i, (x, y) in enumerate(xy):
                    w.writerow([label, i, repr(float(x)), repr(float(y))])


def drift_projection(h_base, h_naive, h_aegis=None, extra: Optional[Dict[str, np.ndarray]] = None) -> DriftProjection:
    """Project state sets onto (naive drift direction, leading base PC orthogonal to it).

    Coordinates are relative to the base mean, so the base set averages to 0
    on the drift axis and the naive set to ``+||mean(naive) - mean(base)||``.
    """
    hb = np.asarray(h_base, dtype=np.float64)
    hn = np.asarray(h_naive, dtype=np.float64)
    mb = hb.mean(axis=0)
    drift = hn.mean(axis=0) - mb
    norm = float(np.linalg.norm(drift))
    if norm == 0:
        raise ValueError("naive states do not drift from the base states")
    a1 = drift / norm
    centred = hb - mb
    _, V = jacobi_svd(centred, vectors=True)
    a2 = None
    for j in range(V.shape[1]):
        v = V[:, j] - (V[:, j] @ a1) * a1
        if np.linalg.norm(v) > 1e-8:
            a2 = v / np.linalg.norm(v)
            break
    if a2 is None:
        raise ValueError("base states have no spread outside the drift direction")
    sets = {"base": hb, "naive": hn}
    if h_aegis is not None:
        sets["aegis"] = np.asarray(h_aegis, dtype=np.float64)
    for k, v in (extra or {}).items():
        sets[k] = np.asarray(v, dtype=np.float64)
    coords = {k: np.stack([(h - mb) @ a1, (h - mb) @ a2], axis=1) for k, h in sets.items()}
    return DriftProjection(a1, a2, coords, norm)


# ---------------------------------------------------------------------------
# run summaries
# ---------------------------------------------------------------------------
def summarize(path, columns: Sequence[str] = SUMMARY_COLUMNS) -> Dict[str, Dict[str, float]]:
    """mean / std (population) / min / max / count of the non-empty cells of each column."""
    values: Dict[str, List[float]] = {c: [] for c in columns}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise KeyError(f"{path} lacks columns {missing}")
        for row in reader:
            for c in columns:
                if row[c] != "":
                    values[c].append(float(row[c]))
    out = {}
    for c, v in values.items():
        a = np.asarray(v)
        if a.size == 0:
            out[c] = {"mean": math.nan, "std": math.nan, "min": math.nan, "max": math.nan, "count": 0}
        else:
            out[c] = {"mean": float(a.mean()), "std": float(a.std()), "min": float(a.min()),
                      "max": float(a.max()), "count": int(a.size)}
    return out


def write_summary(table: Dict[str, Dict[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "mean", "std", "min", "max", "count"])
        for c, s in table.items():
            w.writerow([c] + [repr(float(s[k])) for k in ("mean", "std", "min", "max")] + [s["count"]])
