import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cosa.agents import (ActorCritic, JointCritic, ReplayMemory, ReplayRecord, SentimentAgents, loss_actor,
                         loss_critic, reward, soft_update, td_targets)
from cosa.data import MODALITIES
from cosa.diffcore import grad_check, gradients, zero_last_layer_

H = 8


def states(rng, B=2, T=4, h=H, dtype=torch.float32):
    return {m: torch.tensor(rng.standard_normal((B, T, h)), dtype=dtype) for m in MODALITIES}


def record(rng, ac_dim=H, B=3, T=4, r=None):
    s, s2 = states(rng, B, T, ac_dim), states(rng, B, T, ac_dim)
    a = {m: torch.rand(B, T) for m in MODALITIES}
    return ReplayRecord(s, a, s2, torch.zeros(B) if r is None else r)


def np64(t):
    return t.detach().double().numpy()


# ------------------------------------------------------------------ policies


def test_zero_init_policies_emit_half(rng):
    agents = SentimentAgents(H, 6, seed=0)
    for w in agents(states(rng)).values():
        assert torch.equal(w, torch.full_like(w, 0.5))


def test_live_and_target_identical_after_copy(rng):
    ac = ActorCritic(H, 6, 8, 10, seed=3)
    s = states(rng)
    live, target = ac.act(s), ac.act(s, target=True)
    assert all(torch.equal(live[m], target[m]) for m in MODALITIES)
    a = live
    assert torch.equal(ac.q_value(s, a), ac.q_value(s, a, target=True))


def test_policy_matches_step_by_step_oracle():
    rng = np.random.default_rng(11)
    agents = SentimentAgents(H, 5, seed=4, zero_init=False)
    s = states(rng, B=2, T=4)
    got = agents(s)
    A, b = np64(agents.diff.last.weight), np64(agents.diff.last.bias)
    relu = lambda z: np.maximum(z, 0)
    for m in MODALITIES:
        j, k = [o for o in MODALITIES if o != m]
        l0, l1 = agents.actors[m].layers
        for bi in range(2):
            for t in range(4):
                fi, fj, fk = (np64(s[x][bi, t]) for x in (m, j, k))
                z = np.concatenate([fi, relu(A @ (fi - fj) + b), relu(A @ (fi - fk) + b)])
                hid = relu(np64(l0.weight) @ z + np64(l0.bias))
                out = 1 / (1 + np.exp(-(np64(l1.weight) @ hid + np64(l1.bias))[0]))
                assert got[m][bi, t].item() == pytest.approx(out, abs=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_actions_in_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    agents = SentimentAgents(4, 3, seed=seed, zero_init=False)
    for w in agents({m: scale * v for m, v in states(rng, h=4).items()}).values():
        assert w.min() >= 0 and w.max() <= 1


def test_isolation_inactive_modality(rng):
    agents = SentimentAgents(H, 6, seed=5, zero_init=False)
    s = states(rng)
    s["A"] = torch.zeros_like(s["A"])
    full = agents(s)
    partial = agents(s, active=("V", "T"))
    assert torch.equal(partial["A"], torch.ones_like(partial["A"]))
    assert torch.equal(full["V"], partial["V"]) and torch.equal(full["T"], partial["T"])


def test_state_shape_mismatch(rng):
    s = states(rng)
    s["T"] = s["T"][:, :3]
    with pytest.raises(ValueError, match="state shapes disagree"):
        SentimentAgents(H, 4)(s)


# -------------------------------------------------------------------- critic


def test_zero_head_critic_gives_zero(rng):
    critic = JointCritic(H, 6, 10, seed=0)
    torch.nn.init.zeros_(critic.out.weight)
    torch.nn.init.zeros_(critic.out.bias)
    q = critic(states(rng), {m: torch.rand(2, 4) for m in MODALITIES})
    assert torch.count_nonzero(q) == 0


def test_critic_batch_equivariance(rng):
    critic = JointCritic(H, 6, 10, seed=1)
    s, a = states(rng, B=5), {m: torch.rand(5, 4) for m in MODALITIES}
    perm = torch.tensor([4, 2, 0, 3, 1])
    q = critic(s, a)
    qp = critic({m: v[perm] for m, v in s.items()}, {m: v[perm] for m, v in a.items()})
    assert torch.allclose(qp, q[perm], atol=1e-6)


def test_critic_matches_attention_oracle(rng):
    critic = JointCritic(H, 6, 10, seed=2)
    s, a = states(rng, B=2, T=3), {m: torch.rand(2, 3) for m in MODALITIES}
    got = critic(s, a)
    P = {n: (np64(p)) for n, p in critic.named_parameters()}
    lin = lambda x, name: x @ P[name + ".weight"].T + P[name + ".bias"]
    for b in range(2):
        z = sum(np.concatenate([np64(s[m][b]), np64(a[m][b])[:, None]], axis=1) for m in MODALITIES)
        x = lin(z, "inp")
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        x = (x - mu) / np.sqrt(var + 1e-5) * P["norm.weight"] + P["norm.bias"]
        sc = lin(x, "q") @ lin(x, "k").T / math.sqrt(6)
        att = np.exp(sc - sc.max(-1, keepdims=True))
        att /= att.sum(-1, keepdims=True)
        x = x + lin(att @ lin(x, "v"), "o")
        x = x + lin(np.maximum(lin(x, "ff.0"), 0), "ff.2")
        q = lin(x.mean(0), "out")[0]
        assert got[b].item() == pytest.approx(q, abs=1e-4)


# ------------------------------------------------------------------- rewards


def test_rewards():
    assert reward(torch.tensor([1.5]), torch.tensor([2.0]), "msa").item() == -0.5
    assert reward(torch.tensor([0.7]), torch.tensor([0.7]), "msa").item() == 0.0
    assert reward(torch.zeros(3, 4), torch.tensor([0, 1, 3]), "mer").tolist() == [0.25] * 3
    with pytest.raises(ValueError):
        reward(torch.zeros(1, 4), torch.tensor([4]), "mer")
    with pytest.raises(ValueError):
        reward(torch.zeros(1), torch.zeros(1), "other")


# ------------------------------------------------------------- TD and losses


def _constant_target_critic(ac, value):
    torch.nn.init.zeros_(ac.target_critic.out.weight)
    torch.nn.init.constant_(ac.target_critic.out.bias, value)


def test_td_targets(rng):
    ac = ActorCritic(H, 6, 8, 10, seed=0)
    rec = record(rng, r=torch.tensor([1.0, -2.0, 0.5]))
    assert torch.equal(td_targets(rec, ac, gamma=0.0), rec.reward)
    _constant_target_critic(ac, 4.0)
    rec0 = record(rng, r=torch.zeros(3))
    assert torch.allclose(td_targets(rec0, ac, gamma=0.5), torch.full((3,), 2.0))


def test_critic_loss_values(rng):
    ac = ActorCritic(H, 6, 8, 10, seed=0)
    _constant_target_critic(ac, 0.0)
    torch.nn.init.zeros_(ac.critic.out.weight)
    torch.nn.init.constant_(ac.critic.out.bias, 0.0)
    assert loss_critic(record(rng), ac).item() == 0.0
    torch.nn.init.constant_(ac.critic.out.bias, 2.0)
    assert loss_critic(record(rng), ac).item() == pytest.approx(4.0)


def test_critic_loss_matches_oracle(rng):
    ac = ActorCritic(H, 6, 8, 10, seed=9)
    rec = record(rng, r=torch.tensor([0.3, -1.0, 2.0]))
    q = np64(ac.q_value(rec.states, rec.actions))
    q_next = np64(ac.q_value(rec.next_states, ac.act(rec.next_states, target=True), target=True))
    target = np64(rec.reward) + 0.5 * q_next
    assert loss_critic(rec, ac).item() == pytest.approx(np.mean((q - target) ** 2), abs=1e-6)


def test_bellman_fixed_point(rng):
    torch.manual_seed(0)
    ac = ActorCritic(4, 4, 8, 8, seed=1)
    s = states(rng, B=8, T=3, h=4)
    # stationary environment: the next state is the state and actions follow the policy
    rec = ReplayRecord(s, ac.act(s, target=True), s, torch.ones(8))
    opt = torch.optim.Adam(ac.critic.parameters(), lr=1e-2)
    for _ in range(1500):
        opt.zero_grad()
        loss_critic(rec, ac, gamma=0.5).backward()
        opt.step()
        soft_update(ac.critic, ac.target_critic, 0.05)
    q = ac.q_value(rec.states, rec.actions).detach()
    assert torch.all((q - 2.0).abs() <= 0.05), q


def test_actor_zero_head_gives_zero_loss_and_gradients(rng):
    ac = ActorCritic(H, 6, 8, 10, seed=4)
    torch.nn.init.zeros_(ac.critic.out.weight)
    torch.nn.init.zeros_(ac.critic.out.bias)
    loss = loss_actor(states(rng), ac)
    assert loss.item() == 0.0
    loss.backward()
    assert all(torch.count_nonzero(g) == 0 for g in gradients(ac.agents).values())


def test_actor_loss_decreases_as_q_increases(rng):
    ac = ActorCritic(H, 6, 8, 10, seed=4)
    torch.nn.init.zeros_(ac.critic.out.weight)
    s = states(rng)
    losses = []
    for bias in (-1.0, 0.0, 2.0):
        torch.nn.init.constant_(ac.critic.out.bias, bias)
        losses.append(loss_actor(s, ac).item())
    assert losses == sorted(losses, reverse=True)


def test_actor_grad_check(float64, rng):
    ac = ActorCritic(4, 3, 6, 6, seed=6).double()
    with torch.no_grad():
        for actor in ac.agents.actors.values():
            torch.nn.init.normal_(actor.last.weight, std=0.5)
    s = states(rng, B=2, T=3, h=4, dtype=torch.float64)
    report = grad_check(ac.agents, lambda: loss_actor(s, ac), h=1e-6, tol=1e-3)
    assert report.passed, str(report)


def test_no_gradient_leaks(rng):
    ac = ActorCritic(H, 6, 8, 10, seed=7)
    with torch.no_grad():
        for actor in ac.agents.actors.values():
            torch.nn.init.normal_(actor.last.weight)
    loss_critic(record(rng), ac).backward()
    assert all(torch.count_nonzero(g) == 0 for g in gradients(ac.agents).values())
    assert any(torch.count_nonzero(g) > 0 for g in gradients(ac.critic).values())
    ac.zero_grad()
    loss_actor(states(rng), ac).backward()
    assert all(torch.count_nonzero(g) == 0 for g in gradients(ac.critic).values())
    assert any(torch.count_nonzero(g) > 0 for g in gradients(ac.agents).values())
    assert all(p.requires_grad for p in ac.critic.parameters())


# --------------------------------------------------------------- soft update


def test_soft_update_values():
    live, target = torch.nn.Linear(2, 1), torch.nn.Linear(2, 1)
    with torch.no_grad():
        for p in live.parameters():
            p.fill_(1.0)
        for p in target.parameters():
            p.fill_(0.0)
    soft_update(live, target, 0.01)
    assert all(torch.allclose(p, torch.full_like(p, 0.01)) for p in target.parameters())
    soft_update(live, target, 1.0)
    assert all(torch.equal(p, torch.ones_like(p)) for p in target.parameters())
    with pytest.raises(ValueError):
        soft_update(live, target, 0.0)
    with pytest.raises(ValueError, match="shape mismatch"):
        soft_update(torch.nn.Linear(3, 1), target, 0.5)


def test_soft_update_half_life():
    live, target = torch.nn.Linear(1, 1, bias=False).double(), torch.nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        live.weight.fill_(1.0)
        target.weight.fill_(0.0)
    steps = 0
    while abs(1.0 - target.weight.item()) > 0.5:
        soft_update(live, target, 0.01)
        steps += 1
    assert steps == math.ceil(math.log(0.5) / math.log(0.99)) == 69
    assert target.weight.shape == live.weight.shape


# -------------------------------------------------------------------- replay


def test_replay_fifo_and_sampling(rng):
    mem = ReplayMemory(capacity=3, seed=2)
    recs = [record(rng, r=torch.full((3,), float(i))) for i in range(4)]
    for r in recs:
        mem.push(r)
    assert len(mem) == 3 and [mem[i].reward[0].item() for i in range(3)] == [1.0, 2.0, 3.0]
    assert np.array_equal(mem.sample_indices(10, seed=5), mem.sample_indices(10, seed=5))
    assert mem.sample(0) == []
    with pytest.raises(IndexError):
        ReplayMemory().sample(1)
    with pytest.raises(ValueError):
        ReplayMemory(capacity=0)


def test_replay_record_validation(rng):
    rec = record(rng)
    with pytest.raises(ValueError, match="action for V"):
        ReplayRecord(rec.states, {**rec.actions, "V": torch.zeros(3, 2)}, rec.next_states, rec.reward)
