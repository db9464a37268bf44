"""Elo ratings from pairwise judgments: win-matrix construction and maximum
likelihood fitting by gradient descent, up to an additive gauge.

Win probability of i over j follows the standard convention
p_ij = 1 / (1 + 10^((sigma_j - sigma_i)/400)), increasing in one's own
rating. `paper_literal=True` flips the sign inside the exponent, reproducing
the printed objective verbatim (which rewards losses by higher-rated players).
"""

from __future__ import annotations

import csv
import warnings

import numpy as np
from scipy.special import expit

K = np.log(10.0) / 400.0  # nats per rating point


def win_matrix(judgments, n=None):
    """Counts A[i][j] of i beating j; a tie adds 0.5 both ways."""
    rows = []
    for rec in judgments:
        if isinstance(rec, dict):
            i, j, outcome = rec["i"], rec["j"], rec["outcome"]
        else:
            i, j, outcome = rec
        i, j = int(i), int(j)
        if i == j:
            raise ValueError(f"self-comparison {i} vs {j}")
        rows.append((i, j, outcome))
    if n is None:
        n = 1 + max((max(i, j) for i, j, _ in rows), default=-1)
    a = np.zeros((n, n))
    for i, j, outcome in rows:
        if isinstance(outcome, str) and outcome.lower() == "tie":
            a[i, j] += 0.5
            a[j, i] += 0.5
        else:
            winner = int(outcome)
            if winner == i:
                a[i, j] += 1.0
            elif winner == j:
                a[j, i] += 1.0
            else:
                raise ValueError(f"outcome {outcome!r} names neither {i} nor {j}")
    return a


def read_judgments_csv(path):
    """CSV with header i,j,outcome; outcome is i, j, or 'tie'."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        names = [f.strip() for f in reader.fieldnames or []]
        if names != ["i", "j", "outcome"]:
            raise ValueError(f"expected header i,j,outcome, got {reader.fieldnames}")
        return [{"i": int(r["i"]), "j": int(r["j"]), "outcome": r["outcome"].strip()}
                for r in reader]


def elo_loss(sigma, a, paper_literal=False):
    """Negative log-likelihood of the win counts under the ratings."""
    sigma = np.asarray(sigma, dtype=np.float64)
    d = sigma[:, None] - sigma[None, :]
    z = K * (d if paper_literal else -d)
    return float(np.sum(a * np.logaddexp(0.0, z)))


def _loss_and_grad(sigma, a, paper_literal):
    d = sigma[:, None] - sigma[None, :]
    sign = 1.0 if paper_literal else -1.0
    z = sign * K * d
    loss = float(np.sum(a * np.logaddexp(0.0, z)))
    w = a * expit(z) * (sign * K)  # dL/dd per pair
    grad = w.sum(axis=1) - w.sum(axis=0)
    return loss, grad


def _components(a):
    n = len(a)
    adj = (a + a.T) > 0
    seen = np.zeros(n, dtype=bool)
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in np.nonzero(adj[u])[0]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(np.array(sorted(comp)))
    return comps


def elo_fit(a, tol=1e-8, max_iter=100_000, paper_literal=False, anchor=None):
    """Minimize the pairwise likelihood by gradient descent (backtracking line
    search) to max-gradient < tol, then gauge-fix: zero mean per component, or
    `anchor` pinned to 0 in its component."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"win matrix must be square, got {a.shape}")
    if np.any(a < 0):
        raise ValueError("win counts must be nonnegative")
    comps = _components(a)
    if len(comps) > 1:
        warnings.warn(f"comparison graph has {len(comps)} components; "
                      "ratings are gauge-fixed per component")
    sigma = np.zeros(len(a))
    for comp in comps:
        if len(comp) > 1:
            sub = a[np.ix_(comp, comp)]
            sigma[comp] = _fit_component(sub, tol, max_iter, paper_literal)
    for comp in comps:
        if anchor is not None and anchor in comp:
            sigma[comp] -= sigma[anchor]
        else:
            sigma[comp] -= sigma[comp].mean()
    return sigma


def _fit_component(a, tol, max_iter, paper_literal):
    sigma = np.zeros(len(a))
    loss, grad = _loss_and_grad(sigma, a, paper_literal)
    lr = 1.0 / max(K * K * a.sum(), 1e-12)  # curvature-scale initial step
    for _ in range(max_iter):
        if np.abs(grad).max() < tol:
            return sigma
        step = lr
        while step > 1e-18:
            trial = sigma - step * grad
            trial -= trial.mean()  # loss is shift-invariant; keep the gauge
            new_loss, new_grad = _loss_and_grad(trial, a, paper_literal)
            if new_loss <= loss - 1e-4 * step * float(grad @ grad):
                sigma, loss, grad = trial, new_loss, new_grad
                lr = step * 2.0
                break
            step *= 0.5
        else:
            warnings.warn("elo_fit line search stalled before gradient tolerance")
            return sigma
    warnings.warn("elo_fit hit max_iter before reaching gradient tolerance")
    return sigma
