"""Acceptance criteria 1-8; each test prints one PASS/FAIL line."""

import math
import shutil
import time

import numpy as np
import pytest
import torch

from conftest import assert_gradcheck
from infomae.cli import main
from infomae.config import ExperimentConfig
from infomae.evaluation import ABLATIONS, cells_to_rows, median_accuracy, pair_ratio_sweep, ratio_trend
from infomae.info import (
    DiscreteJoint,
    Discriminator,
    DiscriminatorSet,
    ExactRatios,
    InfoHyper,
    build_product_batch,
    discriminator_loss,
    fit_discriminator,
    log_density_ratio,
    private_info_loss,
    shared_info_loss,
)
from infomae.model import mask_patches, num_masked, patchify, unpatchify
from infomae.objectives import (
    SslHyper,
    augmentation_contrastive_loss,
    masked_reconstruction_loss,
    temporal_locality_loss,
    total_alignment_loss,
)
from infomae.data import WorldConfig, generate_world
from infomae.model import ModelConfig
from infomae.training import TrainConfig, align_crossmodal, alignment_inputs, pretrain_unimodal
from test_objectives import toy_setup

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, text: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
        assert ok, text

    return emit


# ------------------------------------------------------------ criterion 1


class _DiscLoss(torch.nn.Module):
    def __init__(self, disc, joint, seed):
        super().__init__()
        self.disc, self.joint = disc, joint
        self.product = build_product_batch(joint, (1,), np.random.default_rng(seed))

    def forward(self):
        return discriminator_loss(self.disc, self.joint, self.product)


def _grad_instances(seed):
    g = torch.Generator().manual_seed(seed)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    b = int(torch.randint(2, 5, (1,), generator=g))
    d = int(torch.randint(2, 9, (1,), generator=g))
    torch.manual_seed(seed)
    discs = DiscriminatorSet([(1, 4, 4), (1, 4, 4)], 2, 2, hidden=8).double()
    for p in discs.parameters():
        p.requires_grad_(False)
    x1, x2 = rnd(b, 1, 4, 4), rnd(b, 1, 4, 4)
    hyper = InfoHyper()
    x = rnd(b, 1, 4, 4)
    _, mask = mask_patches(patchify(x, (2, 2)), 0.75, seed)
    # length-L sequences with distinct points so distances stay away from the sqrt kink
    seq = rnd(b, 2, d)
    disc = _DiscLoss(Discriminator("SELF_1", [(d,), (2,)], hidden=8).double(), [rnd(b, d), rnd(b, 2)], seed)
    names = [n for n, _ in disc.named_parameters()]
    params = dict(disc.named_parameters())

    def disc_loss(*values):
        return torch.func.functional_call(disc, dict(zip(names, values)), ())

    return {
        "shared_info": (lambda u1, u2: shared_info_loss(u1, u2, x1, x2, discs, hyper)[0], [rnd(b, 2), rnd(b, 2)]),
        "private_info": (
            lambda v1, v2, u1, u2: private_info_loss(v1, v2, u1, u2, x1, x2, discs, hyper)[0],
            [rnd(b, 2), rnd(b, 2), rnd(b, 2), rnd(b, 2)],
        ),
        "reconstruction": (lambda xh: masked_reconstruction_loss(x, xh, mask, 1.0, (2, 2)), [rnd(b, 1, 4, 4)]),
        "augmentation": (lambda h, hp: augmentation_contrastive_loss(h, hp, 0.5, 1.0), [rnd(2, b, d), rnd(2, b, d)]),
        "temporal": (lambda e: temporal_locality_loss(e, 1.0, 1.0), [seq]),
        "discriminator": (disc_loss, [params[n] for n in names]),
    }


def test_criterion_1_gradients(verdict):
    start = time.time()
    failures = []
    for seed in range(20):
        for name, (fn, inputs) in _grad_instances(seed).items():
            try:
                assert_gradcheck(fn, inputs, rtol=1e-4)
            except AssertionError as exc:
                failures.append(f"{name}@{seed}: {exc}")
    took = time.time() - start
    verdict(1, not failures and took < 60, f"6 gradient checks x 20 instances, {len(failures)} failures, {took:.1f}s {failures[:3]}")


# ------------------------------------------------------------ criterion 2


def _random_world(rng, private: bool):
    n1, n2, nu, nv = rng.integers(2, 5, size=4)
    t = rng.random((n1, n2)) ** 3
    base = DiscreteJoint(t / t.sum(), ["x1", "x2"])
    m = [rng.integers(0, nu, n) for n in (n1, n2)]
    fns = {"u1": (lambda a: m[0][a], ["x1"], nu), "u2": (lambda b: m[1][b], ["x2"], nu)}
    if private:
        p = [rng.integers(0, nv, n) for n in (n1, n2)]
        fns.update({"v1": (lambda a: p[0][a], ["x1"], nv), "v2": (lambda b: p[1][b], ["x2"], nv)})
    return base.with_functions(fns)


def test_criterion_2_discrete_algebra(verdict):
    start = time.time()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        dj = _random_world(rng, private=True)
        support, w = dj.support()
        s = {k: torch.as_tensor(v) for k, v in support.items()}
        w = torch.as_tensor(w)
        hyper = InfoHyper(alpha=0.0, beta=float(rng.random()), gamma=float(rng.random()), epsilon=float(rng.random()))
        shared, _ = shared_info_loss(s["u1"], s["u2"], s["x1"], s["x2"], ExactRatios(dj), hyper, weights=w)
        target = sum(dj.mutual_information(["x1"], ["x2"], [u]) + hyper.beta * dj.entropy([u]) for u in ("u1", "u2"))
        worst = max(worst, abs(float(shared) - target))
        private, _ = private_info_loss(s["v1"], s["v2"], s["u1"], s["u2"], s["x1"], s["x2"], ExactRatios(dj), hyper, weights=w)
        target = sum(
            hyper.gamma * dj.entropy([f"v{i}"]) + hyper.epsilon * dj.mutual_information([f"v{i}"], [f"u{i}"]) for i in (1, 2)
        )
        worst = max(worst, abs(float(private) - target))
    took = time.time() - start
    verdict(2, worst < 1e-9 and took < 60, f"shared and private expansions on 100 tables, max |diff| {worst:.2e}, {took:.1f}s")


# ------------------------------------------------------------ criterion 3


def test_criterion_3_mi_recovery(verdict):
    start = time.time()
    rows = []
    ok = True
    for rho in (0.0, 0.5, 0.8):
        truth = -0.5 * math.log(1 - rho**2)
        est = []
        for seed in range(3):
            g = torch.Generator().manual_seed(seed)
            z = torch.randn(50_000, 2, generator=g)
            a, b = z[:, :1], rho * z[:, :1] + math.sqrt(1 - rho**2) * z[:, 1:]
            torch.manual_seed(seed)
            disc = Discriminator("SELF", [(1,), (1,)])
            fit_discriminator(disc, [a, b], (1,), steps=1500, batch_size=512, seed=seed)
            with torch.no_grad():
                est.append(log_density_ratio(disc, [a, b]).mean().item())
        med = float(np.median(est))
        ok &= abs(med - truth) <= 0.05
        rows.append(f"rho={rho}: {med:.3f} vs {truth:.3f}")
    took = time.time() - start
    verdict(3, ok and took < 180, f"{'; '.join(rows)} ({took:.0f}s)")


# ------------------------------------------------------------ criterion 4


def test_criterion_4_common_variable(verdict):
    t = np.zeros((3, 3, 3))
    for k, p in enumerate([0.2, 0.5, 0.3]):
        t[k, k, k] = p
    cmi = DiscreteJoint(t, ["X1", "X2", "U"]).mutual_information(["X1"], ["X2"], ["U"])
    verdict(4, cmi == 0.0, f"I(X1;X2|U) = {cmi!r} with X1 = X2 = U")


# ----------------------------------------------------- criteria 5, 6 and 8

RATIOS = (0.05, 0.15, 0.25, 0.5)


@pytest.fixture(scope="session")
def experiment():
    cfg = ExperimentConfig()
    args = (cfg.model_config(), cfg.pretrain_config(), cfg.align_config(), cfg.eval_config())
    seeds = [0, 1, 2]
    start = time.time()
    ratio_cells = pair_ratio_sweep(
        cfg.world_config(), RATIOS, ["full"], seeds, *args, extra_probes={"m1": [0], "m2": [1]}
    )
    base_cells = pair_ratio_sweep(cfg.world_config(), [RATIOS[0]], ["concat", "joint"], seeds, *args)
    t5 = time.time() - start
    start = time.time()
    ablation_cells = pair_ratio_sweep(cfg.world_config(), [RATIOS[0]], [v for v in ABLATIONS if v != "full"], seeds, *args)
    t6 = time.time() - start
    rows = cells_to_rows(ratio_cells + base_cells + ablation_cells)
    return {"rows": rows, "t5": t5, "t6": t6}


def test_criterion_5_pair_efficiency(verdict, experiment):
    rows, r0 = experiment["rows"], RATIOS[0]
    full, concat, joint = (median_accuracy(rows, v, r0) for v in ("full", "concat", "joint"))
    trend = ratio_trend(rows, "full")
    curve = [median_accuracy(rows, "full", r) for r in RATIOS]
    ok = full - concat >= 0.05 and full - joint >= 0.05 and trend >= 0.8 and experiment["t5"] < 1800
    verdict(
        5,
        ok,
        f"at ratio {r0}: full {full:.3f}, concat {concat:.3f}, joint {joint:.3f} (need +0.05 each); "
        f"full over ratios {[round(c, 3) for c in curve]}, Spearman {trend:.2f} (need >= 0.8); {experiment['t5']:.0f}s",
    )


def test_criterion_6_ablation_order(verdict, experiment):
    rows = experiment["rows"]
    acc = {v: median_accuracy(rows, v, RATIOS[0]) for v in ABLATIONS}
    worst = min(acc, key=lambda v: (acc[v], v != "noPrivate"))
    ok = acc["noPrivate"] <= acc["full"] and acc["noTemp"] <= acc["full"] and worst == "noPrivate" and experiment["t6"] < 1800
    shown = ", ".join(f"{v} {a:.3f}" for v, a in acc.items())
    verdict(6, ok, f"{shown}; worst {worst} (need noPrivate); {experiment['t6']:.0f}s")


def test_criterion_8_unimodal_benefit(verdict, experiment):
    rows = experiment["rows"]
    parts, ok = [], True
    for name in ("m1", "m2"):
        before = median_accuracy(rows, f"unimodal@{name}")
        after = median_accuracy(rows, f"full@{name}", RATIOS[0])
        ok &= after >= before
        parts.append(f"{name}: {before:.3f} -> {after:.3f}")
    verdict(8, ok, "single-modality probe before -> after alignment, " + "; ".join(parts))


# ------------------------------------------------------------ criterion 7


TINY = """
world: {num_sequences: 12, sequence_length: 10, labeled_fraction: 0.5}
model: {embed_dim: 8, encoder_depth: 1, decoder_dim: 8}
pretrain: {epochs: 1, batch_size: 32}
align: {pair_ratio: 0.5, epochs: 1, batch_size: 4}
eval: {probe_steps: 50}
"""


def _pipeline(root, config):
    for cmd in ("generate", "pretrain", "align", "probe"):
        assert main([cmd, "--config", str(config), "--out", str(root)]) == 0
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest")
    return {str(p.relative_to(root)): p.read_bytes() for p in files}


def test_criterion_7_mechanical_invariants(verdict, tmp_path, capsys):
    start = time.time()
    checks = {}
    checks["mask count"] = all(num_masked(p, 0.75) == round(0.75 * p) for p in range(1, 65)) and num_masked(16, 0.75) == 12

    x, x_hat = torch.randn(2, 1, 4, 4), torch.randn(2, 1, 4, 4)
    visible, mask = mask_patches(patchify(x, (2, 2)), 0.75, 0)
    p = patchify(x_hat, (2, 2)).clone()
    for n in range(2):
        p[n, visible.index[n]] += 5.0
    checks["visible-entry insensitivity"] = torch.equal(
        masked_reconstruction_loss(x, x_hat, mask, 1.0, (2, 2)),
        masked_reconstruction_loss(x, unpatchify(p, (2, 2), (1, 4, 4)), mask, 1.0, (2, 2)),
    )

    models, discs, batch, tc = toy_setup(0)
    inp = alignment_inputs(models, batch, tc, 0)
    checks["h = u||v"] = all(torch.equal(h, torch.cat([u, v], 1)) for h, u, v in zip(inp.h, inp.u, inp.v))
    checks["B=1 contrastive = 0"] = abs(augmentation_contrastive_loss(torch.randn(1, 4), torch.randn(1, 4), 0.5, 1.0).item()) < 1e-7
    ssl = SslHyper()
    checks["collapsed temporal = eta*margin"] = math.isclose(
        ssl.eta * temporal_locality_loss(torch.zeros(3, 2, 4), 1.0, ssl.margin).item(), ssl.eta * ssl.margin, rel_tol=1e-12
    )
    bd = total_alignment_loss(inp, discs, tc.info, tc.ssl)
    checks["breakdown sum"] = math.isclose(bd.weighted_total.item(), sum(v.item() for v in bd.weighted.values()), rel_tol=1e-9)

    ds = generate_world(WorldConfig(num_sequences=12, sequence_length=10, pair_ratio=0.5), 0)
    small = ModelConfig(embed_dim=8, encoder_depth=1, decoder_dim=8, shared_dim=2, private_dim=2)
    models = pretrain_unimodal(ds, small, TrainConfig(stage="unimodal", epochs=0))
    try:
        align_crossmodal(ds, models, TrainConfig(stage="align", epochs=2, batch_size=4, sequence_length=2, debug=True))
        checks["phase A/B isolation"] = True
    except AssertionError:
        checks["phase A/B isolation"] = False

    config = tmp_path / "tiny.yaml"
    config.write_text(TINY)
    first = _pipeline(tmp_path / "run", config)
    shutil.rmtree(tmp_path / "run")
    second = _pipeline(tmp_path / "run", config)
    checks["bitwise pipeline rerun"] = first == second and len(first) > 0
    capsys.readouterr()

    took = time.time() - start
    failed = [k for k, v in checks.items() if not v]
    verdict(7, not failed and took < 300, f"{len(checks) - len(failed)}/{len(checks)} invariants hold {failed}, {took:.1f}s")
