"""Sequential dual-backward and grouped Gram-Schmidt projection.

The task gradient of each parameter group is compared against the gradient of
the transport penalty.  Where their inner product is negative the task
gradient is replaced by ``g_task - alpha * g_ot`` with
``alpha = <g_task, g_ot> / (||g_ot||^2 + eps)``, which is orthogonal to
``g_ot`` up to the ``eps`` slack.  Non-conflicting groups pass through
untouched.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .autograd import ParameterStore, Tensor, backward, release_graph

GRANULARITIES = ("global", "per_tensor", "layer_wise")
_LAYER = re.compile(r"^llm\.layers\.(\d+)\.")


@dataclass
class LayerGroup:
    gid: str
    members: List[str]
    granularity: str
    exempt: bool = False


def make_groups(names: Sequence[str], granularity: str = "layer_wise",
                exempt_residual: bool = False) -> List[LayerGroup]:
    """Partition trainable VLM parameter names into projection groups.

    ``layer_wise`` puts every tensor of transformer layer l into ``layer.l``;
    parameters outside the transformer stack (embeddings, projector, final
    norm, output head) form one group per module.  ``exempt_residual`` marks
    those residual groups as always pass-through.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")
    names = list(names)
    if granularity == "global":
        return [LayerGroup("global", names, granularity)]
    if granularity == "per_tensor":
        return [LayerGroup(n, [n], granularity) for n in names]
    groups: Dict[str, LayerGroup] = {}
    for n in names:
        m = _LAYER.match(n)
        if m:
            gid, exempt = f"layer.{int(m.group(1))}", False
        else:
            gid, exempt = n.rsplit(".", 1)[0], exempt_residual
        if gid not in groups:
            groups[gid] = LayerGroup(gid, [], granularity, exempt)
        groups[gid].members.append(n)
    return list(groups.values())


@dataclass
class GroupRecord:
    gid: str
    dot: float
    ot_sq: float
    task_sq: float
    cos: float
    alpha: float
    applied: bool
    energy_before: float
    energy_after: float
    exempt: bool = False

    @property
    def inert(self) -> bool:
        """No OT signal reaches this group, so it can never conflict."""
        return self.ot_sq == 0.0 or self.exempt


@dataclass
class ProjectionReport:
    groups: List[GroupRecord] = field(default_factory=list)
    preclip_norm: float = float("nan")
    ot_penalty: float = float("nan")
    ot_layers: List[float] = field(default_factory=list)
    fm_loss_raw: float = float("nan")

    def _active(self) -> List[GroupRecord]:
        return [g for g in self.groups if not g.inert]

    @property
    def throttle_rate(self) -> float:
        act = self._active()
        return sum(g.applied for g in act) / len(act) if act else 0.0

    @property
    def energy_shed_ratio(self) -> float:
        before = sum(g.energy_before for g in self.groups)
        after = sum(g.energy_after for g in self.groups)
        return max(0.0, 1.0 - after / before) if before > 0 else 0.0

    @property
    def avg_cos(self) -> float:
        act = self._active()
        return float(np.mean([g.cos for g in act])) if act else 0.0

    @property
    def avg_alpha(self) -> float:
        app = [g.alpha for g in self.groups if g.applied]
        return float(np.mean(app)) if app else 0.0

    @property
    def applied(self) -> List[str]:
        return [g.gid for g in self.groups if g.applied]


# ---------------------------------------------------------------------------
# dual backward
# ---------------------------------------------------------------------------
def dual_backward(l_fm: Tensor, l_ot: Tensor, store: ParameterStore, vlm_names: Sequence[str],
                  accumulate: bool = False) -> None:
    """Two ordered backward passes over one graph, caching each into a slot.

    After the call every trainable parameter's ``task`` slot holds the
    flow-matching gradient, every VLM parameter's ``ot`` slot holds the
    transport gradient, and all grad buffers are zero.
    """
    trainable = store.trainable()
    store.zero_grads(trainable)
    backward(l_fm, retain=True)
    store.clone_grads_to("task", trainable, accumulate=accumulate)
    store.zero_grads(trainable)
    backward(l_ot, retain=False)
    store.clone_grads_to("ot", vlm_names, accumulate=accumulate)
    store.zero_grads(trainable)
    release_graph(l_fm)


# ---------------------------------------------------------------------------
# geometry and projection
# ---------------------------------------------------------------------------
def group_geometry(group: LayerGroup, store: ParameterStore, eps: float = 1e-6):
    """Return ``(dot, ||g_ot||^2, cos, ||g_task||^2)`` for the concatenated group vectors."""
    d = n = tt = 0.0
    for name in group.members:
        gt = store.slot("task", name).reshape(-1)
        go = store.slot("ot", name).reshape(-1)
        d += float(gt @ go)
        n += float(go @ go)
        tt += float(gt @ gt)
    cos = d / (math.sqrt(tt) * math.sqrt(n) + eps)
    return d, n, cos, tt


def project(group: LayerGroup, store: ParameterStore, eps: float = 1e-6) -> GroupRecord:
    """Write the projected (or passed-through) task gradient into the grad buffers."""
    d, n, cos, tt = group_geometry(group, store, eps)
    applied = d < 0.0 and not group.exempt
    alpha = 0.0
    after = tt
    if applied:
        assert n > 0.0, "negative dot with a zero OT gradient is impossible"
        alpha = d / (n + eps)
        after = 0.0
        for name in group.members:
            g = store.slot("task", name) - alpha * store.slot("ot", name)
            store[name].grad = g
            after += float(np.vdot(g, g))
    else:
        for name in group.members:
            store[name].grad = store.slot("task", name).copy()
    return GroupRecord(group.gid, d, n, tt, cos, alpha, applied, tt, after, group.exempt)


def project_all(groups: Sequence[LayerGroup], store: ParameterStore, eps: float = 1e-6) -> ProjectionReport:
    seen = set()
    report = ProjectionReport()
    for g in groups:
        for name in g.members:
            if name in seen:
                raise ValueError(f"parameter {name!r} belongs to more than one group")
            seen.add(name)
        report.groups.append(project(g, store, eps))
    return report


def energy_identity_residual(rec: GroupRecord) -> float:
    """Relative gap between ||g_final||^2 and ||g_task||^2 (1 - cos^2) for a group."""
    want = rec.task_sq * (1.0 - rec.cos ** 2)
    return abs(rec.energy_after - want) / max(rec.task_sq, 1e-300)


# ---------------------------------------------------------------------------
# one optimisation step
# ---------------------------------------------------------------------------
def run_step(learner, step: int, anchor, transport_cfg=None, groups=None) -> ProjectionReport:
    """Forward, both losses, dual backward per micro-batch, project, clip, step.

    Micro-batch gradients are summed into the ``task``/``ot`` slots and the
    projection runs once on the accumulated slots.
    """
    from .transport import TransportConfig, total_penalty

    cfg = learner.cfg
    tcfg = transport_cfg or TransportConfig(cfg.ot_eps, cfg.ot_normalization, cfg.ot_scale)
    if groups is None:
        groups = make_groups(learner.vlm_names, cfg.granularity, cfg.exempt_residual)
    store = learner.store
    raw_sum = ot_sum = 0.0
    layer_sum = None
    for k, batch in enumerate(learner.micro_batches(step)):
        batch = batch.trimmed()
        noise = learner.noise(step, k, batch)
        l_fm, raw, out, mask = learner.fm_forward(batch, noise, capture=True)
        l_ot, terms = total_penalty(out.hidden, mask, anchor, tcfg)
        dual_backward(l_fm, l_ot * (1.0 / cfg.grad_accum), store, learner.vlm_names,
                      accumulate=k > 0)
        raw_sum += raw.item()
        ot_sum += l_ot.item()
        layer_sum = np.asarray(terms) if layer_sum is None else layer_sum + terms
    report = project_all(groups, store, cfg.proj_eps)
    for name in learner.expert_names:
        store[name].grad = store.slot("task", name).copy()
    n = cfg.grad_accum
    report.ot_penalty = ot_sum / n
    report.ot_layers = list(layer_sum / n)
    report.fm_loss_raw = raw_sum / n
    report.preclip_norm = learner.finish_step(step)
    return report
