import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import assert_gradcheck
from infomae.info import DiscriminatorSet, InfoHyper
from infomae.model import ModelConfig, mask_patches, patchify, unpatchify
from infomae.objectives import (
    SslHyper,
    augmentation_contrastive_loss,
    masked_reconstruction_loss,
    sequence_distances,
    temporal_locality_loss,
    total_alignment_loss,
)
from infomae.training import Batch, TrainConfig, alignment_inputs, new_model

# ------------------------------------------------------------ reconstruction


def test_perfect_reconstruction_is_zero():
    x = torch.randn(3, 1, 4, 4)
    _, mask = mask_patches(patchify(x, (2, 2)), 0.75, 0)
    assert masked_reconstruction_loss(x, x.clone(), mask, 1.0, (2, 2)).item() == 0.0


def test_reconstruction_hand_example():
    x = torch.zeros(1, 1, 1, 4)
    x_hat = torch.tensor([[[[1.0, 7.0, 3.0, 5.0]]]])
    mask = torch.tensor([[0, 2]])
    assert masked_reconstruction_loss(x, x_hat, mask, 1.0).item() == pytest.approx(5.0)
    assert masked_reconstruction_loss(x, x_hat, mask, 2.0).item() == pytest.approx(10.0)


def test_reconstruction_ignores_visible_entries():
    x, x_hat = torch.randn(2, 1, 4, 4), torch.randn(2, 1, 4, 4)
    visible, mask = mask_patches(patchify(x, (2, 2)), 0.5, 1)
    base = masked_reconstruction_loss(x, x_hat, mask, 1.0, (2, 2))
    p = patchify(x_hat, (2, 2)).clone()
    for n in range(2):
        p[n, visible.index[n]] += 100.0
    moved = unpatchify(p, (2, 2), (1, 4, 4))
    assert masked_reconstruction_loss(x, moved, mask, 1.0, (2, 2)).item() == pytest.approx(base.item())


def test_reconstruction_errors():
    x = torch.zeros(2, 1, 4, 4)
    with pytest.raises(ValueError, match="empty mask"):
        masked_reconstruction_loss(x, x, torch.zeros(2, 0, dtype=torch.long), 1.0, (2, 2))
    with pytest.raises(ValueError, match="shape mismatch"):
        masked_reconstruction_loss(x, torch.zeros(2, 1, 4, 2), None, 1.0, (2, 2))


# --------------------------------------------------------------- contrastive


def test_single_sample_contrastive_is_zero():
    h = torch.randn(1, 6)
    assert augmentation_contrastive_loss(h, torch.randn(1, 6), 0.5, 1.0).item() == pytest.approx(0.0, abs=1e-7)


def test_identical_embeddings_give_log_three():
    h = torch.ones(2, 3)
    assert augmentation_contrastive_loss(h, h.clone(), 1.0, 1.0).item() == pytest.approx(math.log(3))


def test_contrastive_linear_in_lambda():
    h, hp = torch.randn(4, 5), torch.randn(4, 5)
    a = augmentation_contrastive_loss(h, hp, 0.7, 1.0)
    assert augmentation_contrastive_loss(h, hp, 0.7, 3.0).item() == pytest.approx(3 * a.item(), rel=1e-6)


def test_contrastive_temperature_error():
    with pytest.raises(ValueError, match="tau"):
        augmentation_contrastive_loss(torch.ones(2, 2), torch.ones(2, 2), 0.0, 1.0)


def test_contrastive_is_stable_for_large_logits():
    h = torch.randn(4, 5) * 100
    assert torch.isfinite(augmentation_contrastive_loss(h, h + 1, 0.01, 1.0))


@given(st.integers(2, 6), st.integers(0, 1000))
def test_contrastive_permutation_invariance(b, seed):
    g = torch.Generator().manual_seed(seed)
    h, hp = torch.randn(2, b, 4, generator=g, dtype=torch.float64), torch.randn(2, b, 4, generator=g, dtype=torch.float64)
    perm = torch.randperm(b, generator=g)
    a = augmentation_contrastive_loss(h, hp, 0.5, 1.0)
    c = augmentation_contrastive_loss(h[:, perm], hp[:, perm], 0.5, 1.0)
    assert a.item() == pytest.approx(c.item(), rel=1e-10)


# ------------------------------------------------------------------ temporal


def test_collapsed_embeddings_give_margin():
    e = torch.zeros(3, 4, 5)
    assert temporal_locality_loss(e, 1.0, 1.0).item() == pytest.approx(1.0)
    assert temporal_locality_loss(e, 0.1, 1.0).item() == pytest.approx(0.1)


def test_well_separated_sequences_give_zero():
    e = torch.zeros(3, 2, 1)
    e[:, 1] = 0.01
    e[1] += 10
    e[2] += 20
    assert temporal_locality_loss(e, 1.0, 1.0).item() == 0.0


def test_temporal_hand_example():
    e = torch.tensor([[[0.0], [1.0]], [[0.5], [1.5]]])
    c = sequence_distances(e)
    torch.testing.assert_close(c, torch.tensor([[0.5, 0.75], [0.75, 0.5]]))
    assert temporal_locality_loss(e, 1.0, 1.0).item() == pytest.approx(0.75)


def test_temporal_needs_two_sequences():
    with pytest.raises(ValueError, match="B >= 2"):
        temporal_locality_loss(torch.zeros(1, 3, 2), 1.0)


@given(st.integers(0, 1000))
def test_temporal_rigid_motion_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    e = torch.randn(3, 2, 4, generator=g, dtype=torch.float64)
    q, _ = torch.linalg.qr(torch.randn(4, 4, generator=g, dtype=torch.float64))
    moved = e @ q.T + torch.randn(4, generator=g, dtype=torch.float64)
    assert temporal_locality_loss(e, 1.0).item() == pytest.approx(temporal_locality_loss(moved, 1.0).item(), abs=1e-10)


# --------------------------------------------------------------------- total


def toy_setup(seed=0, dtype=torch.float64, info=None, ssl=None):
    cfg = ModelConfig(patch_shape=(2, 2), embed_dim=4, encoder_depth=1, decoder_depth=1, decoder_dim=4, shared_dim=2, private_dim=2)
    shape = (1, 4, 4)
    models = [new_model(shape, cfg, m, seed).to(dtype) for m in range(2)]
    torch.manual_seed(seed)
    discs = DiscriminatorSet([shape, shape], 2, 2, hidden=8).to(dtype)
    for p in discs.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(seed)
    x = [torch.randn(4, *shape, generator=g, dtype=dtype) for _ in range(2)]
    tc = TrainConfig(stage="align", info=info or InfoHyper(), ssl=ssl or SslHyper(), seed=seed)
    return models, discs, Batch(x, (2, 2)), tc


def test_breakdown_sums_to_total():
    for seed in range(5):
        models, discs, batch, tc = toy_setup(seed)
        bd = total_alignment_loss(alignment_inputs(models, batch, tc, 0), discs, tc.info, tc.ssl)
        s = sum(v.item() for v in bd.weighted.values())
        assert bd.weighted_total.item() == pytest.approx(s, rel=1e-9)
        rec = bd.as_record()
        assert {"JOINT3_1", "CROSS_2", "PRIV_SHARED_1", "weighted_total", "w_temporal"} <= set(rec)


def test_reconstruction_only_regime():
    info = InfoHyper(use_shared=False, use_private=False)
    ssl = SslHyper(delta=1.0, lam=0.0, eta=0.0)
    models, discs, batch, tc = toy_setup(1, info=info, ssl=ssl)
    bd = total_alignment_loss(alignment_inputs(models, batch, tc, 0), discs, info, ssl)
    assert bd.weighted_total.item() == pytest.approx(bd.reconstruction.item(), rel=1e-12)


def test_ssl_hyper_validation():
    with pytest.raises(ValueError, match="tau"):
        SslHyper(tau=0).validate()
    with pytest.raises(ValueError, match="eta"):
        SslHyper(eta=-1).validate()


class _TotalLoss(torch.nn.Module):
    def __init__(self, models, discs, batch, tc):
        super().__init__()
        self.models = torch.nn.ModuleList(models)
        self.discs = discs
        self.batch, self.tc = batch, tc

    def forward(self):
        inputs = alignment_inputs(list(self.models), self.batch, self.tc, 0)
        return total_alignment_loss(inputs, self.discs, self.tc.info, self.tc.ssl).weighted_total


@pytest.mark.slow
def test_total_gradient_matches_finite_differences():
    models, discs, batch, tc = toy_setup(2)
    module = _TotalLoss(models, discs, batch, tc)
    names = [n for n, p in module.named_parameters() if p.requires_grad]
    params = dict(module.named_parameters())

    def f(*values):
        return torch.func.functional_call(module, {**params, **dict(zip(names, values))}, ())

    assert_gradcheck(f, [params[n] for n in names])
