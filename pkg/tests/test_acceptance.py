"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion.

Criteria 6 and 7 train real models and take a long time on one CPU.
"""
import time

import numpy as np
import pytest

from ccoma import autodiff as ad
from ccoma import checkpoint
from ccoma.autodiff import Tape, Tensor
from ccoma.comm import adjacency_mask
from ccoma.config import load_config
from ccoma.critic import counterfactual_advantage, td_lambda_targets
from ccoma.envs.manufacture import MAINTAIN, PRODUCE, SLIGHTLY_WORN, STOP, ManufactureLine
from ccoma.envs.traffic import TJConfig, TrafficJunction
from ccoma.trainer import Trainer
from gradcheck import check_grads
from test_autodiff import PRIMITIVES
from test_comm import randomize, small_policy
from test_critic import brute_force_lambda_return, small_critic
from test_manufacture import random_available, reward_oracle
from test_traffic import brute_force_collisions, brute_force_reward, random_actions

pytestmark = pytest.mark.acceptance


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nacceptance {n}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, detail


# -- 1: gradient suite -----------------------------------------------------------------

def actor_graph(seed):
    rng = np.random.default_rng(seed)
    pol = small_policy(seed)
    randomize(pol, rng)
    obs, h0 = rng.normal(size=(1, 3, 5)), rng.normal(size=(1, 3, 6))
    mask = adjacency_mask(rng.random((1, 3, 3)) < 0.5)
    pick = np.eye(3)[rng.integers(3, size=3)][None]
    adv = rng.normal(size=(1, 3))

    def loss():
        out = pol.step(obs, mask, h0)
        out = pol.step(obs * 0.5, mask, out.hidden)
        logp = ad.log(ad.sum(ad.mul(out.probs, Tensor(pick)), axis=-1))
        return ad.sum(ad.mul(logp, Tensor(adv)))

    return loss, pol.params.tensors()


def critic_graph(seed):
    rng = np.random.default_rng(seed)
    c = small_critic(seed)
    while True:  # redraw until no relu pre-activation sits within finite-difference reach of its kink
        for t in c.params.tensors():
            t.data = rng.normal(scale=0.5, size=t.shape)
        x = rng.normal(size=(4, c.cfg.input_dim))
        p = {k: v.data for k, v in c.params.items()}
        pre1 = x @ p["l1.w"] + p["l1.b"]
        pre2 = np.maximum(pre1, 0) @ p["l2.w"] + p["l2.b"]
        if min(np.abs(pre1).min(), np.abs(pre2).min()) > 1e-3:
            break
    onehot = np.eye(2)[rng.integers(2, size=4)]
    y = rng.normal(size=4)

    def loss():
        q = ad.sum(ad.mul(c.forward(x), Tensor(onehot)), axis=-1)
        return ad.mean(ad.mul(ad.sub(q, Tensor(y)), ad.sub(q, Tensor(y))))

    return loss, c.params.tensors()


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    worst = {}
    for name, make in PRIMITIVES.items():
        for seed in range(20):
            rng = np.random.default_rng(seed)
            inputs, fn = make(rng)
            w = Tensor(rng.normal(size=fn(*inputs).shape))
            err = check_grads(lambda: ad.sum(ad.mul(fn(*inputs), w)), inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    for name, graph in (("actor", actor_graph), ("critic", critic_graph)):
        for seed in range(20):
            loss, params = graph(seed)
            worst[name] = max(worst.get(name, 0.0), check_grads(loss, params))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 120
    report(capsys, 1, ok, f"{len(worst)} graphs x 20 instances, worst rel err {worst[top]:.2e} ({top}), "
                          f"{elapsed:.0f}s")


# -- 2: counterfactual advantage ---------------------------------------------------------

def test_criterion_2_counterfactual_properties(capsys):
    rng = np.random.default_rng(0)
    n, k = 10_000, 5
    q = rng.normal(scale=10, size=(n, k))
    pi = rng.dirichlet(np.ones(k), size=n)
    adv = np.stack([counterfactual_advantage(q, pi, np.full(n, a)) for a in range(k)], axis=-1)
    zero_mean = np.abs((pi * adv).sum(-1)).max()
    shift = rng.normal(scale=100, size=(n, 1))
    a = rng.integers(k, size=n)
    shift_err = np.abs(counterfactual_advantage(q + shift, pi, a) - counterfactual_advantage(q, pi, a)).max()
    hand = counterfactual_advantage([1.0, 2.0, 3.0], [0.2, 0.3, 0.5], 2)
    ok = zero_mean <= 1e-8 and shift_err <= 1e-8 and abs(hand - 0.7) < 1e-12
    report(capsys, 2, ok, f"max |sum pi A| {zero_mean:.1e}, shift err {shift_err:.1e}, hand example {float(hand)!r}")


# -- 3: TD(lambda) -------------------------------------------------------------------------

def test_criterion_3_td_lambda_oracle(capsys):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 11))
        r, q = rng.normal(size=T), rng.normal(size=T)
        gamma, lam = rng.uniform(0, 1), rng.uniform(0, 1)
        terminal = bool(rng.integers(2))
        got = td_lambda_targets(r, q, gamma, lam, terminal)
        worst = max(worst, np.abs(got - brute_force_lambda_return(r, q, gamma, lam, terminal)).max())
    r, q = rng.normal(size=6), rng.normal(size=6)
    lam0 = np.array_equal(td_lambda_targets(r, q, 0.9, 0.0), r + 0.9 * np.append(q[:-1], 0.0))
    mc = [sum(0.9 ** i * r[t + i] for i in range(6 - t)) for t in range(6)]
    lam1 = np.abs(td_lambda_targets(r, q, 0.9, 1.0) - mc).max() < 1e-12
    ok = worst < 1e-10 and lam0 and lam1
    report(capsys, 3, ok, f"1000 episodes, max err {worst:.1e}; lambda=0 exact {lam0}; lambda=1 exact {lam1}")


# -- 4: masked attention -------------------------------------------------------------------

def test_criterion_4_masked_attention(capsys):
    rng = np.random.default_rng(2)
    row_err, leak, grad_leak = 0.0, 0.0, 0.0
    for seed in range(50):
        pol = small_policy(seed)
        randomize(pol, rng, scale=1.0)
        n = int(rng.integers(2, 7))
        mask = adjacency_mask(rng.random((2, n, n)) < 0.4)
        h = Tensor(rng.normal(size=(2, n, 8)), requires_grad=True)
        with Tape() as tape:
            att = pol.attention_weights(h, mask, 0)
            loss = ad.sum(ad.mul(att, Tensor(rng.normal(size=att.shape))))
        tape.backward(loss)
        a = att.data
        row_err = max(row_err, np.abs(a.sum(-1) - 1).max())
        leak = max(leak, np.abs(a[np.broadcast_to(mask[:, None] == 0, a.shape)]).max(initial=0.0))
        # an agent with no edges must not influence anyone else through the convolution
        iso = mask.copy()
        iso[:, :, 0] = 0
        iso[:, 0, :] = 0
        iso[:, 0, 0] = 1
        x = Tensor(rng.normal(size=(2, n, 8)), requires_grad=True)
        with Tape() as tape:
            out = pol.conv_layer(x, iso, 0)
            others = ad.mul(out, Tensor(np.concatenate([np.zeros((2, 1, 8)), np.ones((2, n - 1, 8))], axis=1)))
            loss = ad.sum(ad.mul(others, Tensor(rng.normal(size=out.shape))))
        tape.backward(loss)
        grad_leak = max(grad_leak, np.abs(x.grad[:, 0]).max())
    path = np.array([[[1, 1, 0], [1, 1, 1], [0, 1, 1]]], dtype=float)
    obs = rng.normal(size=(1, 3, 5))
    moved = obs.copy()
    moved[0, 2] += 1.0
    hops = []
    for layers in (1, 2):
        pol = small_policy(0, n_layers=layers)
        randomize(pol, np.random.default_rng(9))
        hops.append(not np.array_equal(pol.communicate(obs, path).data[0, 0], pol.communicate(moved, path).data[0, 0]))
    ok = row_err <= 1e-9 and leak == 0.0 and grad_leak == 0.0 and hops == [False, True]
    report(capsys, 4, ok, f"row sum err {row_err:.1e}, masked prob {leak}, cross-gradient {grad_leak}, "
                          f"end of 3-node path reached after 1/2 layers: {hops}")


# -- 5: environment oracles ---------------------------------------------------------------

def test_criterion_5_environment_oracles(capsys):
    rng = np.random.default_rng(3)
    traffic_steps = traffic_bad = 0
    env = TrafficJunction(TJConfig("easy"))
    ep = 0
    while traffic_steps < 10_000:
        env.reset(ep)
        ep += 1
        for _ in range(40):
            _, _, r, _, info = env.step(random_actions(env, rng))
            pre_spawn = [env.position(c) for c in env.state.cars if c.tau > 0]
            traffic_bad += info["collisions"] != brute_force_collisions(pre_spawn)
            traffic_bad += abs(r - brute_force_reward(env, info["collisions"])) > 1e-12
            traffic_steps += 1
    line = ManufactureLine()
    ml_steps = ml_bad = buffer_bad = 0
    seed = 0
    while ml_steps < 10_000:
        line.reset(seed, n_randomized=int(rng.choice([0, 2, 4, 6])))
        seed += 1
        done = False
        while not done:
            before = line.state.buffer
            acts = random_available(line, rng)
            _, _, r, done, info = line.step(acts)
            ml_bad += abs(r - reward_oracle(line.config, info["completed"], acts, info["n_broke"])) > 1e-12
            buffer_bad += line.state.buffer != before + info["output"] - info["completed"] or line.state.buffer < 0
            ml_steps += 1

    def traffic_run(s):
        e = TrafficJunction(TJConfig("hard"))
        e.reset(s)
        r = np.random.default_rng(s)
        return [e.step(random_actions(e, r))[2] for _ in range(40)], e.get_state()

    def line_run(s):
        e = ManufactureLine()
        e.reset(s, n_randomized=6)
        r = np.random.default_rng(s)
        return [e.step(random_available(e, r))[2] for _ in range(48)], e.get_state()

    deterministic = all(traffic_run(s) == traffic_run(s) and line_run(s) == line_run(s) for s in range(5))
    ok = traffic_bad == 0 and ml_bad == 0 and buffer_bad == 0 and deterministic
    report(capsys, 5, ok, f"traffic {traffic_steps} steps / {traffic_bad} mismatches; manufacture {ml_steps} steps / "
                          f"{ml_bad} reward and {buffer_bad} buffer violations; deterministic {deterministic}")


# -- 6: scaled learning check ---------------------------------------------------------------

def test_criterion_6_ccoma_learns_traffic_easy(capsys):
    t0 = time.perf_counter()
    cfg = load_config(overrides={"env.name": "traffic", "env.mode": "easy", "train.algo": "CCOMA"})
    random_rate = Trainer(cfg).evaluate(n=500, greedy=False)["success_rate"]
    tr = Trainer(cfg)
    tr.train(200_000)
    trained = tr.evaluate(n=500, greedy=True)["success_rate"]
    minutes = (time.perf_counter() - t0) / 60
    ok = trained >= 0.90 and trained - random_rate >= 0.40
    report(capsys, 6, ok, f"greedy success {trained:.3f} over 500 episodes vs random policy {random_rate:.3f}, "
                          f"{minutes:.1f} min")


# -- 7: ablation ordering ---------------------------------------------------------------------

ABLATION_STEPS = 300_000
ABLATION_SEEDS = (0, 1, 2)


def test_criterion_7_ablation_ordering(capsys):
    t0 = time.perf_counter()
    means = {}
    for algo in ("CCOMA", "COMA", "IQL_COMM"):
        rates = []
        for seed in ABLATION_SEEDS:
            cfg = load_config(overrides={"env.mode": "hard", "train.algo": algo, "train.seed": str(seed)})
            tr = Trainer(cfg)
            tr.train(ABLATION_STEPS)
            rates.append(tr.evaluate(n=96, greedy=True)["success_rate"])
        means[algo] = float(np.mean(rates))
        with capsys.disabled():
            print(f"\n  {algo}: per-seed success {rates}", flush=True)
    ok = means["CCOMA"] >= means["COMA"] >= means["IQL_COMM"]
    detail = " >= ".join(f"{k} {v:.3f}" for k, v in means.items())
    report(capsys, 7, ok, f"{detail} ({(time.perf_counter() - t0) / 60:.0f} min)")


# -- 8: manufacture sanity -------------------------------------------------------------------

def scripted_return(policy, seed, episodes=20):
    total = 0.0
    for e in range(episodes):
        env = ManufactureLine()
        env.reset(seed * 1000 + e, n_randomized=6)
        done = False
        while not done:
            avail = env.availability()
            acts = np.array([policy(m, avail[i]) for i, m in enumerate(env.state.machines)])
            _, _, r, done, _ = env.step(acts)
            total += r
    return total / episodes


def always_produce(machine, avail):
    return PRODUCE if avail[PRODUCE] else MAINTAIN


def maintain_early(machine, avail):
    if not avail[PRODUCE]:
        return MAINTAIN
    return MAINTAIN if machine.health == SLIGHTLY_WORN else PRODUCE


def test_criterion_8_manufacture_sanity(capsys):
    env = ManufactureLine()
    env.reset(0)
    all_stop = sum(env.step(np.full(6, STOP))[2] for _ in range(48))
    expected = -48 * 6 * env.config.c_stop
    wins = [scripted_return(maintain_early, s) > scripted_return(always_produce, s) for s in range(5)]
    ok = all_stop == expected and sum(wins) >= 4
    report(capsys, 8, ok, f"all-stop return {all_stop} (expected {expected}); maintain-early beats always-produce "
                          f"on {sum(wins)}/5 seeds")


# -- 9: checkpoint and metrics formats ----------------------------------------------------------

def test_criterion_9_formats(capsys, tmp_path):
    small = {"model.d_model": "16", "model.n_heads": "2", "model.d_k": "8", "model.rnn_hidden": "16",
             "model.critic_hidden": "16", "eval.period": "320", "eval.episodes": "8"}
    texts, round_trip = [], True
    for run in range(2):
        tr = Trainer(load_config(overrides=small))
        path = tmp_path / f"metrics{run}.jsonl"
        tr.train(960, metrics_path=path)
        texts.append(path.read_bytes())
        a, b = tmp_path / f"a{run}.ccoma", tmp_path / f"b{run}.ccoma"
        tr.save(a)
        checkpoint.save(b, checkpoint.load(a))
        round_trip &= a.read_bytes() == b.read_bytes()
    same_metrics = texts[0] == texts[1] and len(texts[0].splitlines()) == 3
    ok = round_trip and same_metrics
    report(capsys, 9, ok, f"save-load-save identical {round_trip}; rerun metrics identical {same_metrics}")
