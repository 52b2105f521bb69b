"""Time ring composition, small-gain checking and per-room abstraction
against the number of rooms.

    python scripts/network_scaling.py --rooms 10 100 1000 10000
"""
import argparse
import time

from stochabs.bounds import lambda2
from stochabs.network import (GainData, abstract_subsystems, compose_error_max, default_room_grids,
                              gain_graph_from_coupling, interconnect, published_room_gains,
                              ring_of_rooms, room_ssf_constants, small_gain_max)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rooms", type=int, nargs="+", default=[10, 100, 1000])
    ap.add_argument("--internal-points", type=int, default=3)
    ap.add_argument("--delta", type=float, default=0.005)
    args = ap.parse_args()
    grids = default_room_grids(args.internal_points)
    print("rooms,interconnect_s,small_gain_s,small_gain,method,abstract_s,lambda2_quoted,"
          "lambda2_derived")
    for n in args.rooms:
        subs, M = ring_of_rooms(n)
        t0 = time.perf_counter()
        interconnect(subs, M)
        t1 = time.perf_counter()
        adj = gain_graph_from_coupling(subs, M)
        sg = small_gain_max(published_room_gains(adj, args.delta))
        t2 = time.perf_counter()
        abstract_subsystems(subs, grids)
        t3 = time.perf_counter()
        quoted = lambda2(compose_error_max(published_room_gains(adj, args.delta)), 0, 0, 0.5, 100)
        c = room_ssf_constants(subs[0], grids.u_points, args.delta,
                               w_spacing=2.0 / args.internal_points)
        derived = lambda2(compose_error_max(GainData.uniform(adj, c["kappa"], c["gain"], c["psi"])),
                          0, 0, 0.5, 100)
        print(f"{n},{t1 - t0:.3f},{t2 - t1:.3f},{sg.value:.6g},{sg.method},{t3 - t2:.3f},"
              f"{quoted.value:.6g},{derived.value:.6g}")


if __name__ == "__main__":
    main()
