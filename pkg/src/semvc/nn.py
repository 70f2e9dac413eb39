"""Two-hidden-layer tanh MLPs with hand-written backprop, plus the A2C loss.

Parameters are lists ``[W1, b1, W2, b2, W3, b3]`` with ``W`` of shape
``(fan_in, fan_out)``; inputs are row-major batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def init_mlp(rng: np.random.Generator, sizes, zero_head: bool = True) -> list[np.ndarray]:
    """LeCun-normal hidden layers; the output layer starts at zero unless told otherwise."""
    params = []
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i == last and zero_head:
            W = np.zeros((fan_in, fan_out))
        else:
            W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params += [W, np.zeros(fan_out)]
    return params


def mlp_forward(params, X):
    """Return ``(output, cache)``; ``cache`` holds the layer inputs for backprop."""
    acts = [X]
    h = X
    n_layers = len(params) // 2
    for i in range(n_layers):
        W, b = params[2 * i], params[2 * i + 1]
        z = h @ W + b
        h = np.tanh(z) if i < n_layers - 1 else z
        acts.append(h)
    return h, acts


def mlp_backward(params, acts, dout):
    grads = [None] * len(params)
    n_layers = len(params) // 2
    delta = dout
    for i in reversed(range(n_layers)):
        W = params[2 * i]
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
    return grads


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class LossReport:
    total: float
    policy: float
    value: float
    entropy: float


def gated_logits(actor, states, heads, n_actions):
    """Actor logits where each row reads the output block of its decision index."""
    out, cache = mlp_forward(actor, states)
    n_heads = out.shape[1] // n_actions
    blocks = out.reshape(len(out), n_heads, n_actions)
    return blocks[np.arange(len(out)), heads], cache


def a2c_loss_and_grads(actor, critic, states, actions, returns, entropy_coef, advantages=None,
                       heads=None, n_actions=None, state_index=None):
    """Mean A2C loss over steps and its exact gradients.

    Per step: ``-log pi(a|s) * A + 0.5 * (G - V(s))**2 - entropy_coef * H``.
    ``A = G - V(s)`` is treated as a constant; pass ``advantages`` to pin it.
    With ``heads`` the actor output holds one block of ``n_actions`` logits per
    decision index and row ``m`` uses block ``heads[m]``. With
    ``state_index`` the networks run once per row of ``states`` and step
    ``m`` reads row ``state_index[m]``; ``heads`` then indexes ``states``.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=np.int64)
    returns = np.asarray(returns, dtype=float)
    M = len(actions)
    U = len(states)
    if state_index is None:
        state_index = np.arange(M)
    if heads is None:
        heads = np.zeros(U, dtype=np.int64)
        n_actions = actor[-1].shape[0]
    heads = np.asarray(heads, dtype=np.int64)
    u_logits, a_cache = gated_logits(actor, states, heads, n_actions)
    u_values, c_cache = mlp_forward(critic, states)
    logits = u_logits[state_index]
    values = u_values[state_index, 0]
    logp = log_softmax(logits)
    probs = np.exp(logp)
    if advantages is None:
        advantages = returns - values
    rows = np.arange(M)
    ent = -(probs * logp).sum(axis=1)

    policy_loss = -float(np.mean(logp[rows, actions] * advantages))
    value_loss = float(np.mean(0.5 * (returns - values) ** 2))
    entropy = float(np.mean(ent))
    total = policy_loss + value_loss - entropy_coef * entropy

    d_logits = probs * advantages[:, None]
    d_logits[rows, actions] -= advantages
    d_logits += entropy_coef * probs * (logp + ent[:, None])
    d_logits /= M
    d_values = (values - returns) / M

    n_heads = actor[-1].shape[0] // n_actions
    scatter = np.zeros((U, M))
    scatter[state_index, rows] = 1.0
    d_u_logits = scatter @ d_logits
    d_u_values = (scatter @ d_values)[:, None]
    d_out = np.zeros((U, n_heads, n_actions))
    d_out[np.arange(U), heads] = d_u_logits
    actor_grads = mlp_backward(actor, a_cache, d_out.reshape(U, -1))
    critic_grads = mlp_backward(critic, c_cache, d_u_values)
    return LossReport(total, policy_loss, value_loss, entropy), actor_grads, critic_grads


def a2c_loss(actor, critic, states, actions, returns, entropy_coef, advantages, heads=None, n_actions=None,
             state_index=None):
    report, _, _ = a2c_loss_and_grads(actor, critic, states, actions, returns, entropy_coef, advantages,
                                      heads, n_actions, state_index)
    return report.total
