import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from unigen3d.camera import orbit_cameras
from unigen3d.numerics import RngStream, ShapeError, finite_difference_check
from unigen3d.synthdata import generate_scene, render_gt, scene_cameras
from unigen3d.urae import (URAE, SemDistillConfig, TokenGrid, TrainingError, UraeConfig,
                           UraeTrainConfig, encode_appearance, encode_geometry, flatten_latent,
                           load_model, loss_mcos, loss_mdms, loss_sem, parameter_count, patchify,
                           save_model, sem_adapter, train_urae, unflatten_latent, urae_objective)

T = torch.as_tensor


def small_model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = UraeConfig(patch=8, token_dim=16, latent_dim=16, height=32, width=32, heads=2, **kw)
    return URAE(cfg).double()


def test_patchify_shapes_and_zero_input():
    torch.manual_seed(0)
    model = URAE(UraeConfig()).double()
    img = torch.rand(1, 64, 64, 3, dtype=torch.float64)
    sem = patchify(img, model)
    assert sem.kind == "semantic" and sem.shape == (1, 8, 8, 32)
    assert torch.equal(patchify(img, model).tokens, sem.tokens)
    with torch.no_grad():
        model.patchifier.bias.zero_()
        model.app1.bias.zero_()
        model.app2.bias.zero_()
    zero = torch.zeros(1, 64, 64, 3, dtype=torch.float64)
    with torch.no_grad():
        assert float(patchify(zero, model).tokens.abs().max()) == 0.0
        assert float(encode_appearance(zero, model).tokens.abs().max()) == 0.0
    with pytest.raises(ShapeError):
        patchify(torch.zeros(1, 60, 64, 3), model)


def test_appearance_aligned_and_nonconstant():
    model = small_model()
    checker = ((np.indices((32, 32)).sum(0) // 4) % 2).astype(np.float64)
    img = T(np.repeat(checker[None, ..., None], 3, -1))
    app = encode_appearance(img, model, like=patchify(img, model))
    assert app.shape == patchify(img, model).shape
    assert float(app.tokens.detach().var()) > 0


def test_geometry_shapes_and_errors():
    model = small_model()
    cams = orbit_cameras(4, 3.0, 32, 32)
    img = torch.rand(4, 32, 32, 3, dtype=torch.float64)
    sem = patchify(img, model)
    v = encode_geometry(sem, encode_appearance(img, model), cams, model)
    assert v.shape == (4, 4, 4, 16)
    with pytest.raises(ShapeError):
        encode_geometry(sem, None, cams[:3], model)
    with pytest.raises(ValueError):
        encode_geometry(TokenGrid("appearance", sem.tokens), None, cams, model)


def test_geometry_view_permutation_equivariance():
    model = small_model().eval()
    cams = orbit_cameras(4, 3.0, 32, 32)
    img = torch.rand(4, 32, 32, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    perm = [2, 0, 3, 1]
    with torch.no_grad():
        _, _, v = model.encode(img, cams)
        _, _, vp = model.encode(img[perm], [cams[i] for i in perm])
    assert float((v[perm] - vp).abs().max()) < 1e-12


def test_single_view_differs_from_joint():
    model = small_model().eval()
    # blocks start as the identity; give the residual branches weights as training would
    torch.manual_seed(1)
    with torch.no_grad():
        for blk in model.geometry.blocks:
            for lin in (blk.view_attn.out_proj, blk.cross_attn.out_proj, blk.mlp[2]):
                lin.weight.normal_(0, 0.1)
    cams = orbit_cameras(2, 3.0, 32, 32)
    img = torch.rand(2, 32, 32, 3, dtype=torch.float64)
    with torch.no_grad():
        joint = model.encode(img, cams)[2]
        alone = model.encode(img[:1], cams[:1])[2]
    assert alone.shape == (1, 4, 4, 16)
    assert float((joint[0] - alone[0]).abs().max()) > 1e-6


def test_sem_adapter():
    model = small_model()
    img = torch.rand(2, 32, 32, 3, dtype=torch.float64)
    sem = patchify(img, model)
    out = sem_adapter(sem, model)
    assert out.kind == "sem_aligned" and out.shape == (2, 4, 4, 16)
    assert torch.equal(out.tokens, sem_adapter(sem, model).tokens)
    with pytest.raises(ValueError):
        sem_adapter(out, model)


def test_sem_adapter_weight_gradient():
    model = small_model()
    cams = orbit_cameras(1, 3.0, 32, 32)
    img = torch.rand(1, 32, 32, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        v = model.encode(img, cams)[2]
    sem = patchify(img, model)
    w = model.adapter[2].bias

    def loss_at(x):
        with torch.no_grad():
            w.copy_(T(x))
        return loss_sem(sem_adapter(sem, model), v)

    def f(x):
        with torch.no_grad():
            return float(loss_at(x))

    def g(x):
        model.zero_grad()
        loss_at(x).backward()
        return w.grad.numpy().copy()
    assert finite_difference_check(f, g, w.detach().numpy().copy()).max_rel_error < 1e-4


def test_flatten_roundtrip(gen):
    x = T(gen.standard_normal((3, 4, 5, 6)))
    f = flatten_latent(x)
    assert f.shape == (3, 20, 6)
    assert torch.equal(f[1, 7], x[1, 1, 2])  # row-major
    assert torch.equal(unflatten_latent(f, 4, 5), x)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_mcos_examples(gen):
    cfg = SemDistillConfig()
    z = T(unit(gen.standard_normal((2, 3, 3, 4))))
    assert float(loss_mcos(z, z, cfg)) == 0.0
    e1 = torch.zeros(1, 2, 2, 4, dtype=torch.float64)
    e2 = e1.clone()
    e1[..., 0] = 1
    e2[..., 1] = 1
    assert float(loss_mcos(e1, e2, cfg)) == pytest.approx(0.95, abs=1e-15)
    with pytest.raises(ShapeError):
        loss_mcos(z, z[:1], cfg)


def test_mdms_examples(gen):
    cfg = SemDistillConfig()
    z = T(gen.standard_normal((2, 3, 3, 4)))
    assert float(loss_mdms(z, z, cfg)) == 0.0
    one = T(gen.standard_normal((2, 1, 1, 4)))
    assert float(loss_mdms(one, T(gen.standard_normal((2, 1, 1, 4))), cfg)) == 0.0
    zz = torch.tensor([[[[1.0, 0.0]], [[1.0, 0.0]]]], dtype=torch.float64)
    vv = torch.tensor([[[[1.0, 0.0]], [[0.0, 1.0]]]], dtype=torch.float64)
    assert float(loss_mdms(zz, vv, cfg)) == pytest.approx(0.475, abs=1e-12)
    mixed_mcos = float(loss_mcos(zz, vv, cfg))
    assert float(loss_sem(zz, vv, cfg)) == pytest.approx(mixed_mcos + 0.475, abs=1e-12)
    cfg0 = SemDistillConfig(lambda_mdms=0.0)
    assert float(loss_sem(zz, vv, cfg0)) == pytest.approx(mixed_mcos, abs=1e-15)
    assert float(loss_sem(z, z, cfg)) == 0.0


def test_losses_match_scalar_oracle_100_instances():
    cfg = SemDistillConfig()
    g = np.random.default_rng(2024)
    for k in range(100):
        n, h, w = int(g.integers(1, 3)), int(g.integers(1, 5)), int(g.integers(1, 5))
        c = int(g.integers(2, 6))
        z = g.standard_normal((n, h, w, c))
        v = z + g.uniform(0.1, 2.0) * g.standard_normal(z.shape)
        assert abs(float(loss_mcos(T(z), T(v), cfg)) - oracles.loss_mcos(z.tolist(), v.tolist(), 0.05)) < 1e-10
        assert abs(float(loss_mdms(T(z), T(v), cfg)) - oracles.loss_mdms(z.tolist(), v.tolist(), 0.05)) < 1e-10


def test_mcos_oracle_on_2x2x4(gen):
    z, v = gen.standard_normal((1, 2, 2, 4)), gen.standard_normal((1, 2, 2, 4))
    assert abs(float(loss_mcos(T(z), T(v))) - oracles.loss_mcos(z.tolist(), v.tolist(), 0.05)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_rescaling_invariant(seed):
    g = np.random.default_rng(seed)
    z = g.standard_normal((2, 2, 3, 5))
    v = g.standard_normal((2, 2, 3, 5))
    sz = g.uniform(0.5, 5.0, (2, 2, 3, 1))
    sv = g.uniform(0.5, 5.0, (2, 2, 3, 1))
    for fn in (loss_mcos, loss_mdms):
        assert abs(float(fn(T(z * sz), T(v * sv))) - float(fn(T(z), T(v)))) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_zero_inside_margins(seed):
    g = np.random.default_rng(seed)
    z = g.standard_normal((1, 3, 3, 6))
    v = z + 0.01 * g.standard_normal(z.shape)   # cos > 0.999 per token
    zf, vf = z.reshape(9, 6), v.reshape(9, 6)
    cos_tok = (zf * vf).sum(1) / np.linalg.norm(zf, axis=1) / np.linalg.norm(vf, axis=1)
    if cos_tok.min() >= 0.95:
        assert float(loss_mcos(T(z), T(v))) == 0.0
    gz = unit(zf) @ unit(zf).T
    gv = unit(vf) @ unit(vf).T
    if np.abs(gz - gv).max() <= 0.05 - 1e-9:
        assert float(loss_mdms(T(z), T(v))) == 0.0


@pytest.mark.parametrize("fn", [loss_mcos, loss_mdms])
@pytest.mark.parametrize("arg", [0, 1])
def test_loss_gradients_both_arguments(fn, arg, gen):
    z = gen.standard_normal((2, 2, 3, 4))
    v = z + 0.7 * gen.standard_normal(z.shape)
    pair = [z, v]

    def f(x):
        p = [T(a) for a in pair]
        p[arg] = T(x)
        with torch.no_grad():
            return float(fn(*p))

    def g(x):
        p = [T(a) for a in pair]
        p[arg] = T(x).requires_grad_(True)
        fn(*p).backward()
        return p[arg].grad.numpy()

    base = pair[arg]
    # skip probes near a kink (|arg| < 1e-6 is vanishingly unlikely at random points)
    assert finite_difference_check(f, g, base).max_rel_error < 1e-4


def test_urae_objective():
    cfg = SemDistillConfig()
    assert urae_objective(0.0, 0.0, cfg) == 0.0
    assert urae_objective(1.0, 2.0, cfg) == pytest.approx(1.2)
    with pytest.raises(ValueError):
        urae_objective(-1.0, 0.0, cfg)
    with pytest.raises(ValueError):
        urae_objective(0.0, -0.1, cfg)
    with pytest.raises(ValueError):
        SemDistillConfig(m1=1.0)
    with pytest.raises(ValueError):
        SemDistillConfig(lambda_sem=-1)


def _records(n, size=32):
    return [render_gt(generate_scene(s), scene_cameras(s, 4, size, size), size, size)
            for s in range(n)]


def _train(steps, seed=0, **kw):
    torch.manual_seed(seed)
    model = URAE(UraeConfig(patch=8, token_dim=16, latent_dim=16, height=32, width=32, heads=2, **kw))
    rows = train_urae(_records(1), model, UraeTrainConfig(steps=steps, lr=3e-3, lr_final=3e-3),
                      RngStream(seed))
    return model, rows


def test_training_decreases_loss_and_replays():
    _, rows = _train(200)
    first = np.mean([r["loss"] for r in rows[:10]])
    last = np.mean([r["loss"] for r in rows[-10:]])
    assert last < first


def test_training_replay_bit_identical():
    a = [r["loss"] for r in _train(15, seed=4)[1]]
    b = [r["loss"] for r in _train(15, seed=4)[1]]
    assert a == b


def test_training_errors():
    torch.manual_seed(0)
    model = URAE(UraeConfig(patch=8, token_dim=16, latent_dim=16, height=32, width=32, heads=2))
    with pytest.raises(ValueError):
        train_urae([], model, UraeTrainConfig(steps=1), RngStream(0))
    with torch.no_grad():
        model.heads.out.bias.fill_(float("nan"))
    with pytest.raises(TrainingError) as err:
        train_urae(_records(1), model, UraeTrainConfig(steps=3), RngStream(0))
    assert err.value.step == 0


def test_weights_roundtrip(tmp_path):
    model = small_model().float()
    save_model(tmp_path / "w.ulw", model)
    assert (tmp_path / "w.ulw").read_bytes()[:4] == b"ULW1"
    other = small_model(seed=9).float()
    load_model(tmp_path / "w.ulw", other)
    for (k, a), (_, b) in zip(model.state_dict().items(), other.state_dict().items()):
        assert torch.equal(a, b), k
    assert 0 < parameter_count(model) < 10**7
