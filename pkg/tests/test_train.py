import numpy as np
import pytest
import torch

from surrogate_iva import train as tr
from surrogate_iva.glu import init_glu, save_params
from surrogate_iva.iva import SeparationState, iss_update_source, iss_vector
from surrogate_iva.metrics import coherence_loss, minimal_distortion_scale, pit_wrap, si_sdr
from surrogate_iva.models import gauss_weights, laplace_weights
from surrogate_iva.numerics import rank1_row_update
from surrogate_iva.stft import StftConfig, istft, stft

from conftest import crandn, finite_difference, make_mixture


def test_autoclip_examples():
    assert tr.autoclip_threshold(tr.GradClipState(10, list(range(1, 11)))) == pytest.approx(1.9)
    assert tr.autoclip_threshold(tr.GradClipState(37, [5.0])) == 5.0
    assert tr.autoclip_threshold(tr.GradClipState(50, [3.0, 1.0, 2.0])) == 2.0
    with pytest.raises(tr.EmptyHistory):
        tr.autoclip_threshold(tr.GradClipState(10))


def test_autoclip_never_increases_norm(rng):
    state = tr.GradClipState(10)
    for _ in range(30):
        g = {"a": torch.from_numpy(rng.standard_normal(5) * rng.uniform(0.1, 10))}
        before = float(g["a"].norm())
        tr.autoclip(g, state)
        assert float(g["a"].norm()) <= before + 1e-12


def test_autoclip_p100_keeps_running_max(rng):
    state = tr.GradClipState(100)
    running = 0.0
    for _ in range(30):
        g = {"a": torch.from_numpy(rng.standard_normal(4) * rng.uniform(0.1, 10))}
        before = float(g["a"].norm())
        running = max(running, before)
        tr.autoclip(g, state)
        assert float(g["a"].norm()) == pytest.approx(before)


def test_adam_zero_gradient_only_decays():
    cfg = tr.TrainConfig(learning_rate=0.1, weight_decay=0.01)
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    tr.adam_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, {}, 1, cfg)
    np.testing.assert_allclose(p["w"].numpy(), np.array([1.0, -2.0]) * (1 - 0.1 * 0.01))


def test_adam_constant_gradient_unit_step():
    cfg = tr.TrainConfig(learning_rate=1e-3, weight_decay=0.0)
    p = {"w": torch.zeros(1, dtype=torch.float64)}
    moments = {}
    prev = 0.0
    for t in range(1, 501):
        tr.adam_step(p, {"w": torch.tensor([0.37], dtype=torch.float64)}, moments, t, cfg)
        step = prev - float(p["w"])
        prev = float(p["w"])
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_adam_sign_symmetry():
    cfg = tr.TrainConfig(learning_rate=1e-2)
    p = {"a": torch.tensor([0.5], dtype=torch.float64), "b": torch.tensor([0.5], dtype=torch.float64)}
    g = {"a": torch.tensor([0.2], dtype=torch.float64), "b": torch.tensor([-0.2], dtype=torch.float64)}
    tr.adam_step(p, g, {}, 1, cfg)
    decayed = 0.5 * (1 - cfg.learning_rate * cfg.weight_decay)
    assert float(p["a"]) - decayed == pytest.approx(-(float(p["b"]) - decayed))


def test_backward_linear():
    net = init_glu(9, 4)
    params = dict(net.named_parameters())
    grads = tr.backward(sum(p.sum() for p in params.values()), params)
    for g in grads.values():
        assert bool((g == 1).all())


def test_backward_non_finite():
    p = {"x": torch.tensor([0.0], dtype=torch.float64, requires_grad=True)}
    with pytest.raises(tr.NonFiniteGradient):
        tr.backward(torch.sqrt(p["x"]).sum(), p)


def gradcheck_real(fn, inputs, rng, n_coords=20, tol=1e-4):
    """Compare autograd with central differences on random coordinates of real inputs."""
    inputs = [x.clone().requires_grad_() for x in inputs]
    grads = torch.autograd.grad(fn(*inputs), inputs)
    worst = 0.0
    for _ in range(n_coords):
        i = int(rng.integers(len(inputs)))
        idx = tuple(int(rng.integers(s)) for s in inputs[i].shape)
        fd = finite_difference(lambda: fn(*inputs), inputs[i], idx)
        ad = float(grads[i][idx])
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), 1e-8))
    assert worst < tol


def as_c(re_im):
    return torch.complex(re_im[0], re_im[1])


def test_grad_log_magnitude(rng):
    a = torch.from_numpy(rng.standard_normal((2, 4, 5)))
    w = torch.from_numpy(rng.standard_normal((4, 5)))
    gradcheck_real(lambda z: (torch.log(as_c(z).abs() + 1e-6) * w).sum(), [a], rng)


def test_grad_classical_weights(rng):
    a = torch.from_numpy(rng.standard_normal((2, 4, 5)))
    w = torch.from_numpy(rng.standard_normal((4, 5)))
    gradcheck_real(lambda z: (laplace_weights(as_c(z)) * w).sum(), [a], rng)
    gradcheck_real(lambda z: (gauss_weights(as_c(z)) * w).sum(), [a], rng)


def test_grad_iss_vector_and_update(rng):
    y = torch.from_numpy(rng.standard_normal((2, 3, 3, 6)))
    r = torch.from_numpy(rng.uniform(0.5, 2.0, (3, 3, 6)))
    c = torch.from_numpy(rng.standard_normal((3, 3)))

    def f_vec(z, rr):
        v, _ = iss_vector(as_c(z), rr, 1)
        return (v.real * c).sum() + (v.imag * c.T).sum()

    gradcheck_real(f_vec, [y, r], rng, n_coords=40)

    def f_update(z, rr):
        st = SeparationState.initial(as_c(z))
        out = iss_update_source(st, rr, 0)
        return (out.Y.abs() ** 2 * rr).sum() + out.W.real.sum()

    gradcheck_real(f_update, [y, r], rng, n_coords=40)


def test_grad_rank1(rng):
    w = torch.from_numpy(rng.standard_normal((2, 3, 3)))
    v = torch.from_numpy(rng.standard_normal((2, 3)))
    c = torch.from_numpy(rng.standard_normal((3, 3)))
    gradcheck_real(lambda a, b: (rank1_row_update(as_c(a), as_c(b), 2).abs() * c).sum(), [w, v], rng)


def test_grad_scaling_istft_and_losses(rng):
    cfg = StftConfig(16)
    y = torch.from_numpy(rng.standard_normal((2, 2, 9, 6)))
    x = torch.from_numpy(rng.standard_normal((2, 9, 6)))
    refs = torch.from_numpy(rng.standard_normal((2, cfg.n_samples(6))))

    def f_sdr(a, b):
        scaled, _ = minimal_distortion_scale(as_c(a), as_c(b))
        return pit_wrap(istft(scaled, cfg), refs, "si_sdr").value

    gradcheck_real(f_sdr, [y, x], rng, n_coords=40)

    S = stft(refs, cfg)

    def f_coh(a):
        return pit_wrap(as_c(a), S, "coherence").value

    gradcheck_real(f_coh, [y], rng, n_coords=40)

    def f_single(a):
        return si_sdr(a[0], refs[0]) + coherence_loss(stft(a[1], cfg), S[1])

    gradcheck_real(f_single, [refs + torch.from_numpy(rng.standard_normal(refs.shape))], rng)


def tiny_samples(n, seed0=0, frame=64, duration=0.3):
    cfg = StftConfig(frame)
    out = []
    for i in range(n):
        x, refs = make_mixture(seed0 + i, mixing="convolutive", duration=duration, taps=4)
        out.append(tr.prepare(x, refs, cfg))
    return out


def tiny_cfg(**kw):
    base = dict(frame_size=64, hidden=8, n_iters_unrolled=3, max_epochs=2, batch_size=2, seed=4, learning_rate=1e-2)
    base.update(kw)
    return tr.TrainConfig(**base)


def strip_wall(records):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


def test_train_lr_zero_freezes_model():
    train, val = tiny_samples(4), tiny_samples(2, seed0=10)
    cfg = tiny_cfg(learning_rate=0.0)
    net, records = tr.train_samples(train, val, cfg)
    ref = init_glu(33, 8, cfg.dropout, seed=cfg.seed)
    assert save_params(net) == save_params(ref)
    vals = [r["value"] for r in records if r["split"] == "val"]
    assert len(vals) == 3 and len(set(vals)) == 1


def test_train_deterministic():
    train, val = tiny_samples(4), tiny_samples(2, seed0=10)
    a_net, a_rec = tr.train_samples(train, val, tiny_cfg())
    b_net, b_rec = tr.train_samples(train, val, tiny_cfg())
    assert strip_wall(a_rec) == strip_wall(b_rec)
    assert save_params(a_net) == save_params(b_net)
    assert [r["epoch"] for r in a_rec] == [0, 1, 1, 2, 2]


def test_train_skips_then_aborts(monkeypatch):
    train, val = tiny_samples(4), tiny_samples(1, seed0=10)
    calls = {"n": 0}
    real = tr.separation_loss

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] % 2:
            raise tr.NonFiniteGradient("injected")
        return real(*args)

    monkeypatch.setattr(tr, "separation_loss", flaky)
    with pytest.raises(tr.TrainingDegenerate):
        tr.train_samples(train, val, tiny_cfg(max_epochs=1))
    calls["n"] = 0
    tr.train_samples(train, val, tiny_cfg(max_epochs=1, max_skip_fraction=0.6))


def test_train_from_manifest(tmp_path):
    from surrogate_iva import mixsim
    from surrogate_iva.glu import load_archive

    sp = mixsim.MixtureSpec(duration_s=0.3, seed=2, taps=4)
    mixsim.make_dataset(sp, 6, tmp_path / "d", fractions=(0.5, 0.25, 0.25))
    records = tr.train(tmp_path / "d", tiny_cfg(max_epochs=1), tmp_path / "m.ssma", log_path=tmp_path / "log.jsonl")
    assert load_archive(tmp_path / "m.ssma", n_bins=33).hidden == 8
    import json

    logged = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert logged == records
    assert set(logged[0]) == {"epoch", "split", "loss_name", "value", "wall_ms"}


def test_train_coherence_loss_runs():
    train, val = tiny_samples(2), tiny_samples(1, seed0=10)
    _, records = tr.train_samples(train, val, tiny_cfg(loss="coherence", max_epochs=1))
    assert records[1]["loss_name"] == "neg_coherence"
    assert -1.0 <= records[1]["value"] <= 0.0
