"""Named finite-difference gradient checks, grouped by subsystem.

Each check builds a deterministic scalar function, compares reverse-mode
gradients against central differences (h = 1e-3 unless noted), and returns
(name, max relative error, tolerance). Used by the ``gradcheck`` CLI
subcommand and the acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, gradcheck
from .body import build_template, forward_kinematics, project_weak_perspective, skin_mesh
from .config import RunConfig
from .data import synth_sample
from .foreground import PfeConfig
from .interaction import PartBoxes, roi_tokens
from .metrics import loss_bbox, loss_kpts, loss_param
from .model import UpperBodyModel
from .nn import CorrBlock, ParamStore
from .training import build_model, sample_loss


def tiny_config() -> RunConfig:
    # image 24 -> 6x6 feature map, so the RoI degeneracy clamp (2/6) sits
    # well away from the 0.5 box size the untrained BoxNet predicts
    return RunConfig(feature_dim=8, prior_tokens=3, strip_len=3, heads=2,
                     roi_grid=2, image_size=24, dataset_size=1).validate()


def tiny_model(seed: int = 7) -> UpperBodyModel:
    cfg = tiny_config()
    model = build_model(cfg, seed=seed)
    model.template = build_template(seed, rings=2, ring_pts=3)
    return model


def _tensor_checks():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    yield ("tensor.sum_of_squares",
           gradcheck(lambda x: (0.5 * x * x).sum(), [Tensor(rng.normal(size=(6,)), requires_grad=True)]),
           1e-7)
    yield ("tensor.matmul_tanh",
           gradcheck(lambda x, y: ag.tanh(ag.matmul(x, y)).sum(), [a, b]), 1e-4)

    logits = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    target = np.zeros((3, 5))
    target[np.arange(3), [1, 4, 0]] = 1.0

    def xent(x):
        p = ag.softmax_lastdim(x)
        return -(Tensor(target) * ag.tlog(p)).sum()

    yield ("tensor.softmax_cross_entropy", gradcheck(xent, [logits]), 1e-5)

    x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 1, 5)) * 0.3, requires_grad=True)

    def convpool(xx, kk):
        y = ag.conv2d(xx, kk, padding=(0, 2))
        y = ag.adaptive_avg_pool(ag.gelu(y), 2, 3)
        return (y * y).sum()

    yield ("tensor.conv2d_pool_chain", gradcheck(convpool, [x, k]), 1e-4)

    fmap = Tensor(rng.normal(size=(3, 5, 5)), requires_grad=True)
    pts = Tensor(rng.uniform(0.3, 3.7, size=(6, 2)), requires_grad=True)
    yield ("tensor.bilinear_sample",
           gradcheck(lambda m, p: ag.tanh(ag.bilinear_sample(m, p)).sum(), [fmap, pts]),
           1e-4)


def _foreground_checks():
    ps = ParamStore(3)
    from .foreground import ForegroundExtractor
    pfe = ForegroundExtractor(ps, PfeConfig(feature_dim=8, prior_tokens=3, strip_len=3),
                              heads=2)
    rng = np.random.default_rng(5)
    # the aggregation output projection starts at zero (residual no-op);
    # nudge it so the queries and attention weights carry real gradient
    fc2 = ps.params["pfe.agg.ffn.fc2.weight"]
    fc2.data = np.random.default_rng(29).normal(size=fc2.shape) * 0.2
    image = Tensor(rng.uniform(0, 1, size=(3, 16, 16)))
    # checked w.r.t. the trainable chain parameters; the image itself is data
    # (per-pixel gradients through saturated activations are noise-dominated
    # at the fixed probe step, and conv input gradients are covered by the
    # tensor-suite oracles)
    weights = [ps.params["pfe.strip_h.weight"], ps.params["pfe.queries"],
               ps.params["pfe.agg.attn.q.weight"]]

    def f(*_):
        return (pfe(image).z_human ** 2).sum()

    yield ("foreground.pfe_chain", gradcheck(f, weights), 1e-4)


def _interaction_checks():
    ps = ParamStore(9)
    block = CorrBlock(ps, "chk", 8, 2)
    # zero-initialized projections have zero analytic and numeric gradient at
    # some entries; nudge them off zero so the check is informative
    rngw = np.random.default_rng(17)
    for name in ("chk.attn.out.weight", "chk.ffn.fc2.weight"):
        ps.params[name].data = rngw.normal(size=ps.params[name].shape) * 0.2
    rng = np.random.default_rng(13)
    q = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    kv = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
    picks = [ps.params["chk.attn.q.weight"], ps.params["chk.attn.out.weight"],
             ps.params["chk.ffn.fc1.weight"]]
    yield ("interaction.corr_block",
           gradcheck(lambda qq, kk, *_: (block(qq, kk) ** 2).sum(), [q, kv] + picks),
           1e-4)

    fmap = Tensor(rng.normal(size=(4, 6, 6)), requires_grad=True)
    box = Tensor(np.array([0.5, 0.45, 0.4, 0.5]), requires_grad=True)
    yield ("interaction.roi_tokens",
           gradcheck(lambda m, bx: ag.tanh(roi_tokens(m, bx, 3)).sum(), [fmap, box]),
           1e-4)


def _body_checks():
    template = build_template(21, rings=2, ring_pts=3)
    rng = np.random.default_rng(19)
    theta = Tensor(rng.uniform(-0.4, 0.4, size=(53, 3)), requires_grad=True)
    beta = Tensor(rng.uniform(-1, 1, size=10), requires_grad=True)
    phi = Tensor(rng.uniform(-1, 1, size=10), requires_grad=True)

    # a random linear functional of the joints: a symmetric loss such as
    # sum-of-squares has an exactly-zero gradient w.r.t. the root rotation
    # (rigid rotations about the origin preserve it), and the finite
    # difference of an exact zero is pure cancellation noise
    joint_weights = Tensor(rng.normal(size=(53, 3)))

    def fk_loss(th):
        joints, _ = forward_kinematics(template, th)
        return (joints * joint_weights).sum()

    yield ("body.forward_kinematics", gradcheck(fk_loss, [theta]), 1e-4)

    target = rng.normal(size=(template.vertex_count, 3)) * 0.1

    def lbs_loss(th, be, ph):
        verts, _ = skin_mesh(template, th, be, ph)
        diff = verts - Tensor(target)
        return (diff * diff).sum()

    yield ("body.skinning", gradcheck(lbs_loss, [theta, beta, phi]), 1e-4)

    joints = Tensor(rng.normal(size=(53, 3)), requires_grad=True)
    cam = Tensor(np.array([0.7, 0.4, 0.55]), requires_grad=True)
    yield ("body.weak_perspective",
           gradcheck(lambda j, c: (project_weak_perspective(j, c) ** 2).sum(),
                     [joints, cam], h=1e-4), 1e-6)


def _metric_checks():
    from .body import SmplxParams
    rng = np.random.default_rng(23)

    def mk_params(flat_theta, beta, phi):
        return SmplxParams(theta=ag.reshape(flat_theta, (53, 3)), beta=beta,
                           phi=phi, camera=Tensor(np.array([1.0, 0.0, 0.0])))

    th_p = Tensor(rng.uniform(-0.5, 0.5, size=(159,)), requires_grad=True)
    be_p = Tensor(rng.uniform(-1, 1, size=10), requires_grad=True)
    ph_p = Tensor(rng.uniform(-1, 1, size=10), requires_grad=True)
    gt = mk_params(Tensor(rng.uniform(-0.5, 0.5, size=(159,))),
                   Tensor(rng.uniform(-1, 1, size=10)),
                   Tensor(rng.uniform(-1, 1, size=10)))
    yield ("metrics.loss_param",
           gradcheck(lambda t, b, p: loss_param(mk_params(t, b, p), gt),
                     [th_p, be_p, ph_p], h=1e-4), 1e-4)

    p3 = Tensor(rng.normal(size=(53, 3)), requires_grad=True)
    p2 = Tensor(rng.normal(size=(53, 2)), requires_grad=True)
    g3 = Tensor(rng.normal(size=(53, 3)))
    g2 = Tensor(rng.normal(size=(53, 2)))
    yield ("metrics.loss_kpts",
           gradcheck(lambda a, b: loss_kpts(a, g3, b, g2), [p3, p2], h=1e-4), 1e-4)

    bx = Tensor(rng.uniform(0.2, 0.8, size=(12,)), requires_grad=True)
    gt_boxes = PartBoxes(face=Tensor(rng.uniform(0, 1, 4)),
                         lhand=Tensor(rng.uniform(0, 1, 4)),
                         rhand=Tensor(rng.uniform(0, 1, 4)))
    yield ("metrics.loss_bbox",
           gradcheck(lambda b: loss_bbox(
               PartBoxes(face=b[0:4], lhand=b[4:8], rhand=b[8:12]), gt_boxes),
               [bx], h=1e-4), 1e-4)


def _nudge_zero_projections(model: UpperBodyModel, scale: float = 0.05) -> None:
    # the freshly built model zero-initializes its output projections, which
    # makes the loss locally constant in every upstream parameter; nudge the
    # zero weights off zero (small, so no L1 kink falls inside the h=1e-3
    # probe radius) so the check exercises every gradient path
    rng = np.random.default_rng(101)
    for name in sorted(model.params):
        p = model.params[name]
        if name.endswith(".weight") and not np.any(p.data):
            p.data = rng.normal(size=p.shape) * scale


def _model_checks():
    model = tiny_model()
    _nudge_zero_projections(model)
    # sample seed chosen so every L1 difference term sits well away from the
    # |x| kink at the model's prediction (central differences at h=1e-3 must
    # not straddle a sign change)
    sample = synth_sample(54, 0, template=model.template, image_size=24)
    params = [model.params[n] for n in sorted(model.params)]

    def f(*_):
        loss, _ = sample_loss(model, sample)
        return loss.total

    yield ("model.end_to_end_total_loss", gradcheck(f, params), 1e-4)


GROUPS = {
    "tensor": _tensor_checks,
    "foreground": _foreground_checks,
    "interaction": _interaction_checks,
    "body": _body_checks,
    "metrics": _metric_checks,
    "model": _model_checks,
}


def run(module: str = "all"):
    names = list(GROUPS) if module in ("all", None) else [module]
    results = []
    for name in names:
        results.extend(GROUPS[name]())
    return results
