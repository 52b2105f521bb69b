"""Random tiny MDP instances shared by the synthesis and acceptance tests."""
import numpy as np
import scipy.sparse as sp

from stochabs.abstraction import FiniteMdp


def random_mdp(rng, n_states, n_inputs, support=3):
    """Random MDP whose last state is absorbing; each row has at most ``support`` successors."""
    mats = []
    for _ in range(n_inputs):
        P = np.zeros((n_states, n_states))
        for s in range(n_states - 1):
            k = int(rng.integers(1, min(support, n_states) + 1))
            succ = rng.choice(n_states, size=k, replace=False)
            P[s, succ] = rng.dirichlet(np.ones(k))
        P[-1, -1] = 1.0
        mats.append(sp.csr_matrix(P))
    reps = np.arange(n_states - 1, dtype=float)[:, None]
    return FiniteMdp(tuple(mats), reps, np.arange(n_inputs, dtype=float)[:, None])


def dense_mdp(*rows_per_input):
    return FiniteMdp(tuple(sp.csr_matrix(np.asarray(P, dtype=float)) for P in rows_per_input))
