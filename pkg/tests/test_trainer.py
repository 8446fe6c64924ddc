import csv

import numpy as np
import pytest

from kldiff.config import TrainConfig
from kldiff.dataio import checkpoint_bytes, gen_dataset
from kldiff.denoiser import init_params
from kldiff.trainer import (EmaParams, OptimizerState, ReplayBuffer, Trainer, TrainingDiverged,
                            ablation_mode, adam_step, ema_update, model_config, optimizer_step,
                            params_from_checkpoint, select_high_confidence, sgd_step, train,
                            write_history)


def small_cfg(**updates):
    base = TrainConfig().with_updates(
        schedule={"T": 10},
        model={"patch": 4, "d_img": 8, "d_txt": 6, "d_k": 4, "n_blocks": 1, "hidden": 8},
        train={"epochs": 2, "batch_size": 8, "lr": 0.01},
        guidance={"ramp_epochs": 2},
        finetune={"period": 1, "tau": 0.0, "per_caption": 1, "capacity": 6},
    )
    return base.with_updates(**updates) if updates else base


@pytest.fixture(scope="module")
def data():
    imgs, caps, _ = gen_dataset(16, np.random.default_rng(0))
    return imgs, caps


# -- optimizers --------------------------------------------------------------------

def test_sgd_quadratic_step():
    w = {"w": np.array([1.0])}
    sgd_step(w, {"w": 2 * w["w"]}, OptimizerState("sgd", lr=0.1))
    assert w["w"][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_momentum_accumulates():
    w = {"w": np.array([0.0])}
    st = OptimizerState("sgd", lr=1.0, momentum=0.5)
    for _ in range(3):
        sgd_step(w, {"w": np.array([1.0])}, st)
    assert w["w"][0] == -(1 + 1.5 + 1.75)


@pytest.mark.parametrize("g", [1e-6, -3.0, 250.0])
def test_adam_first_step_is_lr(g):
    w = {"w": np.array([0.5])}
    adam_step(w, {"w": np.array([g])}, OptimizerState("adam", lr=0.01))
    step = w["w"][0] - 0.5
    assert np.sign(step) == -np.sign(g)
    assert abs(step) == pytest.approx(0.01, rel=1e-2)


CURV = np.array([2.0, 10.0])     # f(w) = w1^2 + 5 w2^2


def scalar_adam(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Independent per-coordinate Adam on f."""
    out = []
    for w0, c in zip(w, CURV):
        x, m, v = float(w0), 0.0, 0.0
        for k in range(1, steps + 1):
            g = c * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** k)) / ((v / (1 - b2 ** k)) ** 0.5 + eps)
        out.append(x)
    return np.array(out)


def test_adam_quadratic_matches_scalar_reference():
    w0 = np.array([1.0, 0.0])
    w = {"w": w0.copy()}
    st = OptimizerState("adam", lr=0.1)
    for _ in range(50):
        adam_step(w, {"w": CURV * w["w"]}, st)
    np.testing.assert_allclose(w["w"], scalar_adam(w0, 0.1, 50), rtol=1e-12, atol=1e-15)
    assert np.linalg.norm(w["w"]) < 1e-2
    assert st.step == 50


def test_non_finite_gradients_abort():
    for kind in ("sgd", "adam"):
        w = {"w": np.ones(2)}
        with pytest.raises(FloatingPointError):
            optimizer_step(w, {"w": np.array([1.0, np.inf])}, OptimizerState(kind))
        assert np.array_equal(w["w"], np.ones(2))


# -- EMA ----------------------------------------------------------------------------

def test_ema_limits():
    p = {"a": np.array([1.0, 2.0])}
    e0 = ema_update(EmaParams(0.0, {"a": np.zeros(2)}), p)
    assert np.array_equal(e0.shadow["a"], p["a"])
    frozen = EmaParams(1.0, {"a": np.array([7.0, 8.0])})
    for _ in range(3):
        ema_update(frozen, p)
    assert frozen.shadow["a"].tolist() == [7.0, 8.0]


def test_ema_scalar_trajectory():
    ema = EmaParams(0.5, {"w": np.array(0.0)})
    seen = []
    for v in (1.0, 2.0, 3.0):
        seen.append(float(ema_update(ema, {"w": np.array(v)}).shadow["w"]))
    assert seen == [0.5, 1.25, 2.125]


def test_ema_is_convex_combination():
    r = np.random.default_rng(1)
    traj = r.standard_normal(20)
    ema = EmaParams.of({"w": np.array(traj[0])}, 0.8)
    for v in traj:
        ema_update(ema, {"w": np.array(v)})
    # weights: 0.8^20 on the initial value, 0.2 * 0.8^(19 - k) on step k
    weights = np.append(0.8 ** 20, 0.2 * 0.8 ** np.arange(19, -1, -1))
    assert weights.sum() == pytest.approx(1.0, rel=1e-14)
    expected = weights @ np.append(traj[0], traj)
    assert float(ema.shadow["w"]) == pytest.approx(expected, rel=1e-12)
    assert traj.min() <= float(ema.shadow["w"]) <= traj.max()


# -- self-training selection -----------------------------------------------------------

def fixed_scorer(scores):
    return lambda images, captions: np.asarray(scores)[: len(images)]


def test_select_examples():
    samples = [(None, "c")] * 4
    scores = [0.9, 0.4, 0.7, 0.95]
    assert select_high_confidence(samples, fixed_scorer(scores), 0.5, 0.5) == [0, 3]
    assert select_high_confidence(samples, fixed_scorer(scores), 1.0, 1.0) == []
    assert select_high_confidence(samples, fixed_scorer(scores), 0.0, 1.0) == [0, 1, 2, 3]
    assert select_high_confidence([], fixed_scorer([]), 0.0, 1.0) == []


def test_select_ties_prefer_lower_index():
    samples = [(None, "c")] * 5
    assert select_high_confidence(samples, fixed_scorer([0.5, 0.8, 0.8, 0.8, 0.1]),
                                  0.2, 0.5) == [1, 2]


def test_replay_buffer_capacity_and_threshold():
    buf = ReplayBuffer(capacity=3, tau=0.5)
    for i in range(5):
        buf.admit(np.full(2, i), f"c{i}", 0.5 + 0.1 * i, epoch=i)
    assert len(buf) == 3 and buf.captions == ["c2", "c3", "c4"]
    assert all(s >= buf.tau for s in buf.scores)
    with pytest.raises(ValueError):
        buf.admit(np.zeros(2), "x", 0.49, 0)


# -- ablations ----------------------------------------------------------------------------

def test_ablation_modes():
    cfg = small_cfg()
    assert ablation_mode(cfg, "full") is cfg
    no_llm = ablation_mode(cfg, "no_llm")
    assert not no_llm.guidance.text and no_llm.weights == cfg.weights
    no_kl = ablation_mode(cfg, "no_kl")
    assert no_kl.weights.kind == "uniform" and no_kl.guidance == cfg.guidance
    neither = ablation_mode(cfg, "neither")
    assert not neither.guidance.text and neither.weights.kind == "uniform"
    with pytest.raises(ValueError):
        ablation_mode(cfg, "half")


def test_no_llm_never_touches_text_path(data):
    cfg = ablation_mode(small_cfg(guidance={"g_min": 1.0, "g_max": 1.0}), "no_llm")
    tr = Trainer(cfg, *data).run()
    init = init_params(model_config(cfg, tr.vocab))
    text_keys = [k for k in init.arrays if ".cross." in k] + ["embed_table"]
    for k in text_keys:
        assert np.array_equal(tr.params[k], init[k]), k
    assert any(not np.array_equal(tr.params[k], init[k]) for k in init.arrays)
    assert all(row["gate"] == 0.0 for row in tr.history)


# -- the training loop -----------------------------------------------------------------------

def test_zero_epochs_is_initialisation(data):
    cfg = small_cfg(train={"epochs": 0})
    ckpt = train(cfg, *data)
    init = init_params(model_config(cfg, Trainer(cfg, *data).vocab))
    p = params_from_checkpoint(ckpt)
    assert all(np.array_equal(p[k], init[k]) for k in init.arrays)
    assert ckpt.metadata["schedule"]["T"] == 10 and ckpt.metadata["vocab"][0] == "<pad>"
    assert ckpt.metadata["history"] == []


def test_training_is_deterministic(data):
    cfg = small_cfg()
    a = checkpoint_bytes(train(cfg, *data))
    b = checkpoint_bytes(train(cfg, *data))
    assert a == b
    c = checkpoint_bytes(train(cfg.with_updates(train={"seed": 1}), *data))
    assert a != c


def test_finetune_rounds_fill_buffer(data):
    tr = Trainer(small_cfg(), *data).run()
    n_caps = len(set(data[1]))
    # tau = 0 admits everything that survives the top-q cut
    assert [row["admitted"] for row in tr.history] == [int(np.ceil(0.5 * n_caps))] * 2
    assert len(tr.buffer) == min(6, 2 * int(np.ceil(0.5 * n_caps)))
    off = Trainer(small_cfg(finetune={"enabled": False}), *data).run()
    assert len(off.buffer) == 0


def gaussian_toy(seed, n=64):
    r = np.random.default_rng(seed)
    _, caps, _ = gen_dataset(n, r)
    return 0.5 * r.standard_normal((n, 3, 16, 16)), caps


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gaussian_toy_loss_decreases(seed):
    imgs, caps = gaussian_toy(seed)
    cfg = small_cfg(train={"epochs": 10, "seed": seed}, finetune={"enabled": False})
    hist = Trainer(cfg, imgs, caps).run().history
    assert hist[9]["loss"] < hist[0]["loss"]


def test_resume_matches_uninterrupted(data):
    cfg = small_cfg(train={"epochs": 4})
    full = Trainer(cfg, *data).run().checkpoint()
    half = Trainer(cfg, *data).run(2).checkpoint()
    raw = checkpoint_bytes(half)
    from kldiff.dataio import parse_checkpoint
    resumed = Trainer.from_checkpoint(parse_checkpoint(raw), *data).run().checkpoint()
    assert checkpoint_bytes(resumed) == checkpoint_bytes(full)


def test_uniform_weights_equal_elbo_objective(data):
    base = small_cfg(weights={"kind": "uniform"}, finetune={"enabled": False})
    a = Trainer(base, *data).run()
    b = Trainer(base.with_updates(train={"objective": "elbo"}), *data).run()
    for k in a.params.arrays:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]


def test_divergence_aborts_with_epoch(data):
    cfg = small_cfg(train={"max_loss": 1e-3})
    with pytest.raises(TrainingDiverged) as err:
        Trainer(cfg, *data).run()
    assert err.value.epoch == 0 and err.value.loss > 1e-3


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        Trainer(small_cfg(), np.zeros((0, 3, 16, 16)), [])


def test_history_csv(tmp_path, data):
    tr = Trainer(small_cfg(), *data).run()
    write_history(tmp_path / "h.csv", tr.history)
    with open(tmp_path / "h.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert float(rows[1]["loss"]) == tr.history[1]["loss"]
    assert {"kl_q1", "kl_q4", "gate", "buffer"} <= set(rows[0])
    assert float(rows[0]["gate"]) == 0.0 and float(rows[1]["gate"]) == 0.5
