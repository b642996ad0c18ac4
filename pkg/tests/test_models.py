import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from sslwb.augmentation import MaskSpec, make_mask
from sslwb.models import (
    ClassificationHead,
    EncoderConfig,
    HeadConfig,
    MaeDecoder,
    ModelError,
    TeacherState,
    attach_heads,
    build_backbone,
    decode_masked,
    derive_seed,
    ema_update,
    encode,
    encode_visible,
    mask_indices,
    parameter_count,
    patch_tokens_count,
    replace_heads,
)

SMALL = EncoderConfig(depth=2, width=32, patch_size=4, heads=4)


def test_conv_residual_shapes():
    cfg = EncoderConfig(arch="conv_residual", depth=8, width=64)
    net = build_backbone(cfg, 0)
    out = encode(net, torch.rand(8, 3, 32, 32))
    assert out.shape == (8, net.embed_dim)
    assert torch.isfinite(out).all()
    assert 5e5 <= parameter_count(net) <= 2e6


def test_patch_transformer_shapes_and_tokens():
    cfg = EncoderConfig()
    assert patch_tokens_count(cfg) == 64
    net = build_backbone(cfg, 0)
    assert net.tokens(torch.rand(2, 3, 32, 32)).shape == (2, 65, 128)
    assert encode(net, torch.rand(3, 3, 32, 32)).shape == (3, 128)
    # local crops go through interpolated position embeddings
    assert encode(net, torch.rand(3, 3, 16, 16)).shape == (3, 128)


def test_encoder_deterministic_and_seeded():
    net = build_backbone(SMALL, 3)
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(encode(net, x), encode(net, x))
    again = build_backbone(SMALL, 3)
    assert all(torch.equal(a, b) for a, b in zip(net.state_dict().values(), again.state_dict().values()))
    other = build_backbone(SMALL, 4)
    assert not torch.equal(net.pos_embed, other.pos_embed)
    assert derive_seed(0, "backbone") == derive_seed(0, "backbone") != derive_seed(0, "head/cls")


def test_encoder_precision_agreement():
    net = build_backbone(SMALL, 0)
    x = torch.rand(4, 3, 32, 32)
    single = encode(net, x)
    double = encode(net.double(), x.double())
    rel = float((single.double() - double).norm() / double.norm())
    assert rel < 1e-3


def test_encode_errors():
    net = build_backbone(SMALL, 0)
    with pytest.raises(ModelError):
        encode(net, torch.rand(2, 32, 32))
    with pytest.raises(ModelError):
        encode(net, torch.rand(2, 3, 30, 30))
    with pytest.raises(ModelError):
        EncoderConfig(arch="mlp")
    with pytest.raises(ModelError):
        EncoderConfig(input_size=30, patch_size=4)
    conv = build_backbone(EncoderConfig(arch="conv_residual"), 0)
    with pytest.raises(ModelError):
        encode(conv, torch.rand(1, 3, 16, 16))
    net.blocks[0].mlp[0].weight.data.fill_(float("nan"))
    with pytest.raises(ModelError):
        encode(net, torch.rand(1, 3, 32, 32))


def test_encode_visible_token_counts():
    cfg = EncoderConfig(depth=1, width=32, patch_size=16, input_size=224, heads=4)
    assert cfg.num_patches == 196
    net = build_backbone(cfg, 0)
    mask = make_mask(14, 14, 0.75, rng_seed=0)
    assert len(mask.masked_indices) == 147
    latents, keep = encode_visible(net, torch.rand(1, 3, 224, 224), mask)
    assert latents.shape[1] == 49 + 1 and keep.shape == (1, 49)


def test_encode_visible_empty_and_full_mask():
    net = build_backbone(SMALL, 0)
    empty = MaskSpec(8, 8, (), 0.0)
    latents, _ = encode_visible(net, torch.rand(2, 3, 32, 32), empty)
    assert latents.shape[1] == 65
    full = torch.ones(1, 64, dtype=torch.bool)
    with pytest.raises(ModelError):
        encode_visible(net, torch.rand(1, 3, 32, 32), full)
    with pytest.raises(ModelError):
        encode_visible(build_backbone(EncoderConfig(arch="conv_residual"), 0), torch.rand(1, 3, 32, 32), empty)


def test_decoder_shape_and_determinism():
    net = build_backbone(SMALL, 0)
    dec = MaeDecoder(SMALL, 16, 1)
    x = torch.rand(3, 3, 32, 32)
    masks = torch.from_numpy(np.stack([make_mask(8, 8, 0.75, 0, i).as_bool() for i in range(3)]))
    latents, keep = encode_visible(net, x, masks)
    out = decode_masked(dec, latents, keep)
    assert out.shape == x.shape
    assert torch.equal(out, decode_masked(dec, latents, keep))
    with pytest.raises(ModelError):
        dec(latents[:, :-1], keep)


def test_decoder_invariant_to_visible_token_order():
    net = build_backbone(SMALL, 0).double()
    dec = MaeDecoder(SMALL, 16, 1).double()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    mask = make_mask(8, 8, 0.5, rng_seed=2)
    latents, keep = encode_visible(net, x, mask)
    perm = torch.randperm(keep.shape[1], generator=torch.Generator().manual_seed(0))
    shuffled = torch.cat([latents[:, :1], latents[:, 1:][:, perm]], 1)
    a = dec(latents, keep)
    b = dec(shuffled, keep[:, perm])
    assert torch.allclose(a, b, atol=1e-12)


def test_mask_indices_partition():
    mask = make_mask(4, 4, 0.5, rng_seed=1)
    keep, masked = mask_indices(mask)
    assert sorted(keep[0].tolist() + masked[0].tolist()) == list(range(16))
    assert set(masked[0].tolist()) == set(mask.masked_indices)


# ---------------------------------------------------------------------------
# EMA teacher
# ---------------------------------------------------------------------------


def _pair(seed=0):
    g = torch.Generator().manual_seed(seed)
    student = nn.Linear(4, 3).double()
    with torch.no_grad():
        for p in student.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64))
    return student


def test_ema_identities():
    student = _pair(0)
    teacher = TeacherState.from_student(_pair(1), momentum=1.0)
    before = {k: v.clone() for k, v in teacher.params.items()}
    ema_update(teacher, student)
    assert all(torch.equal(before[k], v) for k, v in teacher.params.items())
    teacher.momentum = 0.0
    ema_update(teacher, student)
    assert all(torch.equal(v, dict(student.named_parameters())[k]) for k, v in teacher.params.items())


def test_ema_single_step_arithmetic():
    t = TeacherState(nn.Linear(1, 1, bias=False).double(), momentum=0.996)
    s = nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        t.module.weight.fill_(1.0)
        s.weight.fill_(0.0)
    ema_update(t, s)
    assert abs(float(t.module.weight) - 0.996) < 1e-15


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_ema_two_steps_closed_form(m, seed):
    student = _pair(seed)
    teacher = TeacherState.from_student(_pair(seed + 1), momentum=m)
    t0 = {k: v.clone() for k, v in teacher.params.items()}
    ema_update(teacher, student)
    ema_update(teacher, student)
    for k, v in teacher.params.items():
        s = dict(student.named_parameters())[k].detach()
        expected = m * m * t0[k] + (1 - m * m) * s
        assert float((v - expected).abs().max()) <= 1e-12


def test_ema_schema_mismatch_and_no_grad():
    teacher = TeacherState.from_student(nn.Linear(4, 3))
    with pytest.raises(ModelError):
        ema_update(teacher, nn.Linear(4, 2))
    with pytest.raises(ModelError):
        ema_update(teacher, nn.Linear(5, 3))
    assert all(not p.requires_grad for p in teacher.module.parameters())
    with pytest.raises(ModelError):
        TeacherState(nn.Linear(1, 1), momentum=1.5)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def test_attach_two_heads_and_replace():
    net = build_backbone(SMALL, 0)
    model = attach_heads(net, {"projection": HeadConfig("projection", 64), "cls": HeadConfig("classification", 23)}, seed=0)
    outs = model(torch.rand(2, 3, 32, 32))
    assert len(outs) == 2 and outs[0].shape == (2, 64) and outs[1].shape == (2, 23)
    before = {k: v.clone() for k, v in model.backbone.state_dict().items()}
    new = replace_heads(model, {"cls": HeadConfig("classification", 23)}, seed=1)
    assert len(new(torch.rand(1, 3, 32, 32))) == 1
    assert all(torch.equal(before[k], v) for k, v in new.backbone.state_dict().items())
    with pytest.raises(ModelError):
        replace_heads(model, {"cls": ClassificationHead(7, 3)})


def test_head_config_validation():
    with pytest.raises(ModelError):
        HeadConfig("softmax", 3)
    with pytest.raises(ModelError):
        HeadConfig("projection", 0)
    dino = attach_heads(build_backbone(SMALL, 0), {"dino": HeadConfig("dino", 256)})
    out = dino(torch.rand(2, 3, 32, 32))[0]
    # cosine logits against normalised prototypes
    assert out.shape == (2, 256) and float(out.detach().abs().max()) <= 1 + 1e-6


def test_parameter_count_stable():
    assert parameter_count(build_backbone(EncoderConfig(), 0)) == parameter_count(build_backbone(EncoderConfig(), 1))
