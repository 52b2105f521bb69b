"""Barrier certificates for the heated room: the published quadratic, the
noise floor of any single-vertex quadratic, and a quartic template search.

    python scripts/barrier_search.py [--horizon 10]
"""
import argparse

from stochabs.barrier import (check_cbc, kushner_bound, published_room_certificate,
                              quadratic_noise_floor, search_vertex_cbc)
from stochabs.experiments import ROOM_X, ROOM_X0, ROOM_XU
from stochabs.model import Box, room_model
from stochabs.sim import validate_kushner


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--horizon", type=int, default=10)
    ap.add_argument("--n-traj", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    model = room_model()

    cert = published_room_certificate()
    rep = check_cbc(cert, model, ROOM_X0, ROOM_XU, ROOM_X, 1e-3)
    print("published quadratic:")
    print("  " + rep.to_text().replace("\n", "\n  "))
    kb = kushner_bound(cert.eta, cert.beta, cert.kappa, cert.c, args.horizon)
    print(f"  delta_bar = {kb.value:.6g} ({kb.branch})")
    print(f"quadratic noise floor: {quadratic_noise_floor(model, ROOM_X0, ROOM_XU, args.horizon):.4g}")

    for degree in (2, 4):
        res = search_vertex_cbc(model, ROOM_X0, ROOM_XU, ROOM_X, degree=degree,
                                centers=[[19.75], [20.0], [20.25]],
                                gains=[-0.03, -0.02, -0.01, 0.0], horizon=args.horizon,
                                resolution=0.01, input_box=Box([0.0], [0.6]),
                                verify_resolution=1e-3)
        if res is None:
            print(f"degree {degree}: no certificate found")
            continue
        mc = validate_kushner(model, res.certificate, ROOM_X0, ROOM_XU, args.horizon,
                              args.n_traj, args.seed)
        print(f"degree {degree}: delta_bar = {res.bound.value:.6g}, centre {res.center}, "
              f"{res.evaluated} candidates; MC unsafe frequency {mc.empirical.p_hat:.4g}")


if __name__ == "__main__":
    main()
