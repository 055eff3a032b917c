import pytest
import torch

from lsepkit import flowcore
from lsepkit.errors import NumericalError, ValidationError
from lsepkit.lsep import ProbeHead, probe_head_param_count
from lsepkit.trunk import PRESETS, ModelConfig, SiT, count_parameters, preset

from conftest import perturb_adaln


def _inputs(cfg, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, cfg.input_channels, cfg.input_size, cfg.input_size, generator=g)
    t = torch.rand(batch, generator=g)
    y = torch.randint(0, cfg.num_classes, (batch,), generator=g)
    return x, t, y


def test_config_invariants():
    with pytest.raises(ValidationError):
        ModelConfig(input_size=30, patch_size=4)
    with pytest.raises(ValidationError):
        ModelConfig(depth=4, target_depth=4)
    with pytest.raises(ValidationError):
        ModelConfig(depth=4, target_depth=0)
    cfg = ModelConfig()
    assert cfg.null_label_id == cfg.num_classes
    assert cfg.num_tokens == 64 and cfg.grid_side == 8


def test_presets_match_sit_table():
    assert [(PRESETS[k].depth, PRESETS[k].hidden_dim, PRESETS[k].num_heads, PRESETS[k].target_depth)
            for k in ("B", "L", "XL")] == [(12, 768, 12, 4), (24, 1024, 16, 7), (28, 1152, 16, 8)]
    assert all(PRESETS[k].patch_size == 2 and PRESETS[k].input_channels == 4 for k in ("B", "L", "XL"))
    tiny = PRESETS["tiny"]
    assert (tiny.depth, tiny.hidden_dim, tiny.num_heads, tiny.patch_size, tiny.target_depth) == (6, 192, 3, 4, 2)
    assert preset("tiny", num_classes=7).num_classes == 7


def test_embed_shapes_and_null_row():
    torch.manual_seed(0)
    cfg = preset("tiny")
    model = SiT(cfg)
    x, t, _ = _inputs(cfg)
    tokens, c = model.embed(x, t, torch.tensor([0, cfg.null_label_id]))
    assert tokens.shape == (2, 64, cfg.hidden_dim) and c.shape == (2, cfg.hidden_dim)
    same_t = torch.full((2,), 0.3)
    _, c = model.embed(x, same_t, torch.tensor([0, cfg.null_label_id]))
    assert not torch.allclose(c[0], c[1])
    with pytest.raises(ValidationError):
        model.embed(x, t, torch.tensor([0, cfg.null_label_id + 1]))


def test_embed_deterministic(tiny_model, tiny_cfg):
    x, t, y = _inputs(tiny_cfg, 1)
    x2, t2, y2 = x.repeat(2, 1, 1, 1), t.repeat(2), y.repeat(2)
    tok, c = tiny_model.embed(x2, t2, y2)
    assert torch.equal(tok[0], tok[1]) and torch.equal(c[0], c[1])


def test_forward_velocity_shape_and_determinism(tiny_model, tiny_cfg):
    perturb_adaln(tiny_model)
    x, t, y = _inputs(tiny_cfg, 3)
    a = tiny_model.forward_velocity(x, t, y)
    assert a.shape == x.shape
    assert torch.equal(a, tiny_model.forward_velocity(x, t, y))


def test_prefix_consistency_bitwise(tiny_model, tiny_cfg):
    perturb_adaln(tiny_model)
    x, t, y = _inputs(tiny_cfg, 3)
    record = []
    tiny_model.forward_velocity(x, t, y, record=record)
    for k in range(1, tiny_cfg.depth + 1):
        assert torch.equal(tiny_model.forward_to_depth(x, t, y, k).tokens, record[k - 1])


def test_forward_to_depth_range(tiny_model, tiny_cfg):
    x, t, y = _inputs(tiny_cfg)
    with pytest.raises(ValidationError):
        tiny_model.forward_to_depth(x, t, y, 0)
    with pytest.raises(ValidationError):
        tiny_model.forward_to_depth(x, t, y, tiny_cfg.depth + 1)


def test_labels_modulate_features_after_training_init(tiny_model, tiny_cfg):
    perturb_adaln(tiny_model)
    x, t, _ = _inputs(tiny_cfg, 1)
    a = tiny_model.forward_to_depth(x, t, torch.tensor([0]), 2).tokens
    b = tiny_model.forward_to_depth(x, t, torch.tensor([1]), 2).tokens
    assert (a - b).abs().max() > 1e-6


def test_zero_init_features_label_independent(tiny_model, tiny_cfg):
    x, t, _ = _inputs(tiny_cfg, 1)
    a = tiny_model.forward_to_depth(x, t, torch.tensor([0]), 2).tokens
    b = tiny_model.forward_to_depth(x, t, torch.tensor([tiny_cfg.null_label_id]), 2).tokens
    assert torch.equal(a, b)


def test_label_equivariance_under_table_permutation(tiny_model, tiny_cfg):
    perturb_adaln(tiny_model)
    x, t, y = _inputs(tiny_cfg, 4)
    before = tiny_model.forward_velocity(x, t, y)
    perm = torch.randperm(tiny_cfg.num_classes + 1)
    with torch.no_grad():
        table = tiny_model.y_embedder.weight.clone()
        # new row perm[i] holds the old row i, so label i becomes perm[i]
        tiny_model.y_embedder.weight[perm] = table
    after = tiny_model.forward_velocity(x, t, perm[y])
    assert torch.equal(before, after)


def test_non_finite_activation_reports_layer(tiny_model, tiny_cfg):
    x, t, y = _inputs(tiny_cfg)
    with torch.no_grad():
        tiny_model.blocks[1].adaLN_modulation[-1].bias.fill_(float("inf"))
    with pytest.raises(NumericalError) as info:
        tiny_model.forward_velocity(x, t, y)
    assert info.value.layer == 2


def test_velocity_loss_gradient_finite_differences():
    torch.manual_seed(0)
    cfg = ModelConfig(input_channels=1, input_size=8, patch_size=4, depth=2, hidden_dim=16, num_heads=2,
                      num_classes=3, target_depth=1)
    model = perturb_adaln(SiT(cfg)).double()
    x0, t, y = _inputs(cfg, 2)
    x0 = x0.double()
    eps = torch.randn_like(x0)
    t = t.double()

    def loss():
        nb = flowcore.forward_noising(x0, eps, t)
        return flowcore.velocity_loss(model.forward_velocity(nb.x_t, t, y), x0, eps, t)

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss().backward()
    h = 1e-6
    for p in params[:: max(1, len(params) // 8)]:
        flat = p.data.view(-1)
        idx = torch.randperm(flat.numel())[:5]
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss().item()
            flat[i] = orig - h
            dn = loss().item()
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            an = p.grad.view(-1)[i].item()
            assert abs(an - fd) <= 1e-3 * max(abs(fd), 1e-6) + 1e-9


def test_probe_head_param_delta_closed_form():
    for name in ("B", "L", "XL", "tiny"):
        cfg = PRESETS[name]
        head = ProbeHead(cfg.hidden_dim, cfg.num_classes)
        assert count_parameters(head) == probe_head_param_count(cfg.hidden_dim, cfg.num_classes)
    xl = PRESETS["XL"]
    delta = probe_head_param_count(xl.hidden_dim, xl.num_classes)
    # roughly one million extra parameters at XL scale
    assert 1_000_000 <= delta < 1_500_000


def test_xl_parameter_count_matches_reported_size():
    # SiT-XL/2 is reported at 675M; meta-device construction avoids allocating it.
    with torch.device("meta"):
        model = SiT(PRESETS["XL"], check_finite=False)
    assert round(count_parameters(model) / 1e6) == 675
