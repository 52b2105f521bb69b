"""``stochabs`` command line.

Exit status: 0 success, 1 verification failed (certificate rejected,
small-gain violated, bound exceeded, ...), 2 usage or configuration error.
Artifacts are written atomically into the output directory (``--out``,
``[output] dir``, ``$STOCHABS_OUT`` or ``./stochabs-out``, first match wins)
together with ``manifest.json``.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from dataclasses import replace

import numpy as np
import scipy.sparse as sp

from . import __version__
from . import config as cfgmod
from . import experiments
from .abstraction import AbstractionTooLarge, abstract, validate_mdp
from .barrier import check_cbc, kushner_bound, search_vertex_cbc
from .bounds import grid_ssf_params, lambda1, lambda2, verify_quadratic_ssf
from .config import ConfigError
from .model import UnsupportedModel
from .network import (GainData, SmallGainViolation, abstract_subsystems, compose_error_max,
                      compose_error_sum, default_room_grids, gain_graph_from_coupling,
                      interconnect, published_room_gains, room_ssf_constants, small_gain_max,
                      small_gain_sum)
from .sim import (InsufficientSamples, coupled_grid_run, empirical_probability, simulate,
                  validate_kushner, validate_pro2, validate_pro4)
from .synthesis import policy_csv, refine_policy, value_iterate, values_csv

ENV_OUT = "STOCHABS_OUT"
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _f(v) -> str:
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def _kv(pairs) -> str:
    return "".join(f"{k}={_f(v)}\n" for k, v in pairs)


class Run:
    """Collects artifacts and results; nothing touches the disk until :meth:`commit`."""

    def __init__(self, subcommand: str, cfg: dict, out: Path, threads: int, argv):
        self.subcommand = subcommand
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.argv = list(argv)
        self.files: dict[str, str] = {}
        self.results: dict[str, dict] = {}
        self.failures: list[dict] = []
        self.console: list[str] = []

    def file(self, name: str, text: str) -> None:
        self.files[name] = text

    def result(self, name: str, value, provenance: str = "derived", status: str | None = None):
        rec = {"value": value if not isinstance(value, np.generic) else value.item(),
               "provenance": provenance}
        if status is not None:
            rec["status"] = status
        self.results[name] = rec
        shown = f"{value:.6g}" if isinstance(value, float) else str(value)
        self.console.append(f"{name} = {shown}" + (f"  [{status}]" if status else ""))

    def fail(self, code: str, message: str) -> None:
        self.failures.append({"code": code, "message": message})

    def commit(self, status: str) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        digests = {}
        for name, text in sorted(self.files.items()):
            data = text.encode()
            _atomic_write(self.out / name, data)
            digests[name] = hashlib.sha256(data).hexdigest()
        manifest = {
            "tool": "stochabs",
            "version": __version__,
            "subcommand": self.subcommand,
            "argv": self.argv,
            "config_sha256": cfgmod.config_hash(self.cfg),
            "config": _jsonable(self.cfg),
            "threads": self.threads,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "status": status,
            "errors": self.failures,
            "results": self.results,
            "artifacts": digests,
        }
        _atomic_write(self.out / "manifest.json",
                      (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (_dt.date, _dt.time, _dt.datetime)):
        return obj.isoformat()
    return obj


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# Subcommands. Each is split into ``prepare`` (validation only, may raise
# ConfigError) and the returned callable that computes and fills the Run.


def _prep_abstract(cfg):
    model = cfgmod.parse_model(cfg["model"])
    g = cfgmod.parse_grid(cfg["grid"], model)

    def go(run: Run) -> bool:
        mdp = abstract(model, g.grid, g.inputs, g.trunc, run.threads, g.memory_cap)
        check = validate_mdp(mdp)
        run.file("mdp.csv", mdp.to_csv())
        for k, v in [("states", mdp.n_states), ("inputs", mdp.n_inputs), ("nnz", mdp.nnz()),
                     ("delta", g.grid.delta)]:
            run.result(k, v)
        for k, v in check.items():
            run.result(f"check.{k}", v if not isinstance(v, np.generic) else v.item())
        return True
    return go


def _synthesis(model, g, spec, threads):
    mdp = abstract(model, g.grid, g.inputs, g.trunc, threads, g.memory_cap)
    vf, policy = value_iterate(mdp, spec, grid=g.grid, C=model.C)
    ctrl = refine_policy(policy, g.grid, g.inputs, dfa=spec.dfa, labelmap=spec.labelmap, C=model.C)
    return mdp, vf, policy, ctrl


def _prep_synthesize(cfg):
    model = cfgmod.parse_model(cfg["model"])
    g = cfgmod.parse_grid(cfg["grid"], model)
    spec = cfgmod.parse_spec(cfg["spec"])
    x0 = None
    if "sim" in cfg and "x0" in cfg["sim"] and not isinstance(cfg["sim"]["x0"], dict):
        x0 = cfgmod.parse_x0(cfg["sim"]["x0"], model, "sim.x0")

    def go(run: Run) -> bool:
        mdp, vf, policy, _ = _synthesis(model, g, spec, run.threads)
        run.file("policy.csv", policy_csv(vf, policy, mdp))
        run.file("values.csv", values_csv(vf, mdp))
        init = vf.initial()[:-1]
        run.result("value.max", float(init.max()))
        run.result("value.min", float(init.min()))
        run.result("reachable_pairs", int(np.count_nonzero(policy.reachable))
                   if policy.reachable is not None else -1)
        if x0 is not None:
            idx = int(g.grid.index(x0[None, :])[0])
            run.result("value.x0", float(vf.initial()[idx]))
        return True
    return go


def _prep_bounds(cfg):
    b = cfgmod.parse_bounds(cfg["bounds"])

    def go(run: Run) -> bool:
        reports = []
        ok = True
        if b.lambda1:
            d = b.lambda1
            reports.append(lambda1(d["H"], d["delta"], d["horizon"], d["L_b"]))
            if d["H_bar"] is not None:
                reports.append(lambda1(d["H_bar"], d["delta"], d["horizon"], d["L_b"], "lambda1_bar"))
                reports.append(lambda1(d["H_bar"], d["delta"], d["horizon"], d["L_b"],
                                       "two_lambda1_bar"))
            if d["measure"] is not None and d["measure"] != d["L_b"]:
                # also report the domain-measure variant next to the overridden L_b
                for r in list(reports):
                    if r.kind in ("lambda1", "lambda1_bar", "two_lambda1_bar"):
                        alt = lambda1(r.constants.get("H", r.constants.get("H_bar")), d["delta"],
                                      d["horizon"], d["measure"], r.kind)
                        reports.append(replace(alt, kind=f"{r.kind}_measure"))
        if b.lambda2:
            d = b.lambda2
            reports.append(lambda2(d["ssf"], d["V0"], d["u_sup"], d["epsilon"], d["horizon"]))
        if b.reduced:
            d = b.reduced
            ver = verify_quadratic_ssf(d["concrete"], d["abstract"], d["candidate"], d["shared_noise"])
            run.file("ssf_verification.txt", ver.to_text() + "\n")
            for name, c in ver.checks.items():
                run.result(f"reduced.{name}.margin", float(c["margin"]),
                           status="PASS" if c["holds"] else "FAIL")
            if ver.passed:
                reports.append(lambda2(ver.ssf, d["V0"], d["u_sup"], d["epsilon"], d["horizon"]))
            else:
                ok = False
                run.fail("E_SSF_REJECTED", "quadratic simulation function conditions fail")
        text = "\n\n".join(r.to_text() for r in reports)
        run.file("bounds.txt", text + "\n")
        rows = io.StringIO()
        w = csv.writer(rows, lineterminator="\n")
        w.writerow(["kind", "value", "epsilon", "horizon", "constants"])
        for r in reports:
            consts = ";".join(f"{k}={_f(v)}" for k, v in r.constants.items())
            w.writerow([r.kind, _f(r.value), "" if r.epsilon is None else _f(r.epsilon),
                        "" if r.horizon is None else r.horizon, consts])
        run.file("bounds.csv", rows.getvalue())
        for r in reports:
            run.result(r.kind, r.value)
        return ok
    return go


def _prep_verify_barrier(cfg):
    model = cfgmod.parse_model(cfg["model"])
    bc = cfgmod.parse_barrier(cfg["barrier"], model)
    search = bc.search or {}
    for key in search:
        if key not in ("degree", "centers", "gains", "offsets", "resolution", "clamp"):
            raise ConfigError(f"unknown key barrier.search.{key}")

    def go(run: Run) -> bool:
        cert = bc.certificate
        if cert is None:
            clamp = cfgmod.box(search["clamp"], "barrier.search.clamp") if "clamp" in search else None
            res = search_vertex_cbc(
                model, bc.X0, bc.Xu, bc.X, degree=int(search.get("degree", 2)),
                centers=search.get("centers"), gains=search.get("gains", [0.0]),
                offsets=search.get("offsets"), horizon=bc.horizon,
                resolution=float(search.get("resolution", 0.05)), input_box=clamp,
                verify_resolution=bc.resolution)
            if res is None:
                run.fail("E_CBC_NOT_FOUND", "no template candidate separates X0 from Xu")
                return False
            cert = res.certificate
            coeffs = [cert.poly.coeffs.get((p,), 0.0) for p in range(cert.poly.degree + 1)]
            run.file("certificate.txt", _kv([("coeffs", " ".join(_f(c) for c in coeffs)),
                                             ("eta", cert.eta), ("beta", cert.beta),
                                             ("kappa", cert.kappa), ("c", cert.c),
                                             ("K", " ".join(_f(v) for v in cert.controller.K.ravel())),
                                             ("k0", " ".join(_f(v) for v in cert.controller.k0))]))
        rep = check_cbc(cert, model, bc.X0, bc.Xu, bc.X, bc.resolution, bc.lipschitz)
        kb = kushner_bound(cert.eta, cert.beta, cert.kappa, cert.c, bc.horizon)
        text = rep.to_text() + "\n" + _kv([("delta_bar", kb.value), ("delta_bar.branch", kb.branch),
                                          ("safety_lower_bound", 1.0 - kb.value),
                                          ("horizon", bc.horizon)])
        run.file("cbc_report.txt", text)
        for k, c in rep.conditions.items():
            run.result(f"cbc.{k}.margin", float(c["margin"]), status="PASS" if c["holds"] else "FAIL")
        run.result("delta_bar", kb.value)
        run.result("safety_lower_bound", 1.0 - kb.value)
        if not rep.passed:
            run.fail("E_CBC_REJECTED", "certificate conditions fail on the check grid")
        return rep.passed
    return go


def _network_gains(net, adj, grids=None) -> GainData:
    if net.gains == "explicit":
        return net.explicit
    if net.gains == "quoted":
        return published_room_gains(adj, net.delta)
    # derived: identical rooms; internal inputs quantised when abstractions are built
    spacing = 0.0 if grids is None else 2.0 / net.internal_points
    c = room_ssf_constants(net.subsystems[0], net.u_points[:, None], net.delta, spacing, net.pi)
    return GainData.uniform(adj, c["kappa"], c["gain"], c["psi"], c["k_alpha"],
                            {"source": "derived"})


def _prep_compose(cfg):
    net = cfgmod.parse_network(cfg["network"])

    def go(run: Run) -> bool:
        subs, M = net.subsystems, net.coupling
        model = interconnect(subs, M)
        A = sp.coo_matrix(model.A)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        order = np.lexsort((A.col, A.row))
        for i in order:
            w.writerow([int(A.row[i]), int(A.col[i]), _f(float(A.data[i]))])
        run.file("composed_A.csv", buf.getvalue())
        run.result("composed.states", model.state_dim)
        run.result("composed.inputs", model.input_dim)
        adj = gain_graph_from_coupling(subs, M) if net.gains != "explicit" else net.explicit.G

        grids = None
        if net.abstract:
            grids = default_room_grids(net.internal_points, tuple(net.u_points), net.cells)
            mdps, stats = abstract_subsystems(subs, grids, threads=run.threads)
            seen, rows = set(), []
            for i, m in enumerate(mdps):
                if id(m) in seen:
                    continue
                seen.add(id(m))
                h = hashlib.sha256()
                for mat in m.matrices:
                    for arr in (mat.indptr, mat.indices, mat.data):
                        h.update(arr.tobytes())
                rows.append([i, m.n_states, m.n_inputs, m.nnz(), h.hexdigest()])
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["first_subsystem", "states", "inputs", "nnz", "sha256"])
            w.writerows(rows)
            run.file("abstractions.csv", buf.getvalue())
            run.result("abstractions.distinct", stats["distinct"])

        gains = _network_gains(net, adj, grids)
        sg = small_gain_max(gains)
        ss = small_gain_sum(gains.G)
        report = sg.to_text() + "\n" + _kv([("spectral.holds", ss.holds), ("spectral.value", ss.value),
                                            ("spectral.method", ss.method)])
        run.result("small_gain.max_cycle", sg.value, status="PASS" if sg.holds else "FAIL")
        run.result("small_gain.spectral_radius", ss.value, status="PASS" if ss.holds else "FAIL")
        try:
            params = (compose_error_max(gains) if net.composition == "max"
                      else compose_error_sum(gains, net.weights))
        except SmallGainViolation as exc:
            run.file("small_gain.txt", report + _kv([("refused", str(exc))]))
            run.fail("E_SMALL_GAIN", f"{exc}; witness {exc.witness}")
            return False
        l2 = lambda2(params, net.V0, 0.0, net.epsilon, net.horizon)
        run.file("small_gain.txt", report)
        run.file("network_bound.txt", _kv([("composition", net.composition), ("gains", net.gains),
                                           ("kappa", params.kappa), ("psi", params.psi),
                                           ("k_alpha", params.k_alpha)]) + l2.to_text() + "\n")
        run.file("network_bound.csv", l2.csv_header() + "\n" + l2.csv_row() + "\n")
        run.result("network.kappa", params.kappa)
        run.result("network.psi", params.psi)
        run.result("network.lambda2", l2.value)
        return True
    return go


def _controller(cfg, model, block: dict, threads: int):
    kind = block.get("controller", "constant")
    if kind == "constant":
        u = cfgmod.vector(block.get("u", [0.0] * model.input_dim), "sim.u")
        if u.size != model.input_dim:
            raise ConfigError(f"sim.u must have {model.input_dim} components")
        return lambda: u
    if kind == "barrier":
        if "barrier" not in cfg:
            raise ConfigError("controller = 'barrier' needs a [barrier] block")
        bc = cfgmod.parse_barrier(cfg["barrier"], model)
        if bc.certificate is None:
            raise ConfigError("controller = 'barrier' needs explicit certificate coefficients")
        return lambda: bc.certificate
    if kind == "policy":
        for name in ("grid", "spec"):
            if name not in cfg:
                raise ConfigError(f"controller = 'policy' needs a [{name}] block")
        g = cfgmod.parse_grid(cfg["grid"], model)
        spec = cfgmod.parse_spec(cfg["spec"])
        return lambda: _synthesis(model, g, spec, threads)[3]
    raise ConfigError("sim.controller must be constant, barrier or policy")


def _prep_simulate(cfg, threads):
    model = cfgmod.parse_model(cfg["model"])
    s = cfg["sim"]
    spec = cfgmod.parse_spec(cfg["spec"]) if "spec" in cfg else None
    horizon = cfgmod.number(s.get("horizon", spec.horizon if spec else 100), "sim.horizon", lo=0,
                            integer=True)
    n = cfgmod.number(s.get("n_traj", 1000), "sim.n_traj", lo=1, integer=True)
    seed = cfgmod.number(s.get("seed", 0), "sim.seed", lo=0, integer=True)
    x0 = cfgmod.parse_x0(cfgmod._need(s, "x0", "sim"), model, "sim.x0")
    conf = cfgmod.number(s.get("confidence", 0.99), "sim.confidence", lo=0.5, hi=0.999999)
    make = _controller(cfg, model, s, threads)

    def go(run: Run) -> bool:
        batch = simulate(model, make(), x0, horizon, n, seed, threads=run.threads)
        pairs = [("n_traj", n), ("horizon", horizon), ("seed", seed),
                 ("controller", batch.controller), ("out_of_domain_steps", batch.out_of_domain)]
        if spec is not None:
            est = empirical_probability(batch, spec, model.C, conf)
            pairs += [("p_hat", est.p_hat), ("ci_lower", est.lower), ("ci_upper", est.upper),
                      ("successes", est.successes), ("confidence", conf)]
            run.result("p_hat", est.p_hat)
        final = batch.states[:, -1]
        pairs += [(f"final_mean.x{i}", float(v)) for i, v in enumerate(final.mean(axis=0))]
        run.file("estimates.txt", _kv(pairs))
        if s.get("dump", False):
            run.file("trajectories.csv", batch.to_csv())
        run.result("n_traj", n)
        return True
    return go


def _prep_validate(cfg, threads):
    model = cfgmod.parse_model(cfg["model"])
    v = cfg["validate"]
    kind = cfgmod._need(v, "kind", "validate")
    n = cfgmod.number(v.get("n_traj", 10_000), "validate.n_traj", lo=1, integer=True)
    seed = cfgmod.number(v.get("seed", 0), "validate.seed", lo=0, integer=True)
    res = v.get("resolution")
    res = None if res is None else cfgmod.number(res, "validate.resolution", lo=1e-12)
    if kind == "kushner":
        if "barrier" not in cfg:
            raise ConfigError("validate kind 'kushner' needs a [barrier] block")
        bc = cfgmod.parse_barrier(cfg["barrier"], model)
        if bc.certificate is None:
            raise ConfigError("validate kind 'kushner' needs explicit certificate coefficients")
        call = lambda run: validate_kushner(model, bc.certificate, bc.X0, bc.Xu, bc.horizon, n,
                                            seed, res, run.threads)
    elif kind == "pro4":
        for name in ("grid", "spec"):
            if name not in cfg:
                raise ConfigError(f"validate kind 'pro4' needs a [{name}] block")
        g = cfgmod.parse_grid(cfg["grid"], model)
        spec = cfgmod.parse_spec(cfg["spec"])
        x0 = cfgmod.parse_x0(cfgmod._need(v, "x0", "validate"), model, "validate.x0")

        def call(run):
            mdp, vf, policy, ctrl = _synthesis(model, g, spec, run.threads)
            return validate_pro4(model, vf, ctrl, x0, n, seed, model.C, res)
    elif kind == "pro2-coupled":
        if "grid" not in cfg:
            raise ConfigError("validate kind 'pro2-coupled' needs a [grid] block")
        g = cfgmod.parse_grid(cfg["grid"], model)
        u = cfgmod.vector(v.get("u", g.inputs[0]), "validate.u")
        x0 = cfgmod.parse_x0(cfgmod._need(v, "x0", "validate"), model, "validate.x0")
        eps = cfgmod.number(v.get("epsilon", 0.5), "validate.epsilon", lo=1e-12)
        horizon = cfgmod.number(v.get("horizon", 100), "validate.horizon", lo=1, integer=True)
        pi = cfgmod.number(v.get("pi", 1.0), "validate.pi", lo=1e-12)

        def call(run):
            ssf = grid_ssf_params(model, g.grid, g.inputs, pi)
            X, Xh = coupled_grid_run(model, g.grid, u, x0, horizon, n, seed)
            V0 = float(np.max(np.sum((X[:, 0] - Xh[:, 0]) ** 2, axis=1)))
            return validate_pro2(X, Xh, model.C, model.C, ssf, V0, 0.0, eps, res)
    else:
        raise ConfigError("validate.kind must be kushner, pro4 or pro2-coupled")

    def go(run: Run) -> bool:
        rep = call(run)
        run.file("validation.txt", rep.to_text() + "\n")
        run.result("empirical", rep.empirical.p_hat)
        run.result("bound", rep.bound)
        run.result("passed", rep.passed, status="PASS" if rep.passed else "FAIL")
        if not rep.passed:
            run.fail("E_BOUND_EXCEEDED", f"{kind}: empirical {rep.empirical.p_hat:.6g} "
                                         f"against bound {rep.bound:.6g}")
        return rep.passed
    return go


def _prep_reproduce(section: str):
    name = experiments.SECTIONS.get(section, section)
    if name not in experiments.PIPELINES:
        raise ConfigError(f"unknown section {section!r}; choose from "
                          f"{sorted(experiments.SECTIONS) + sorted(experiments.PIPELINES)}",
                          "E_USAGE")

    def go(run: Run) -> bool:
        fn = experiments.PIPELINES[name]
        kwargs = {"threads": run.threads} if name in ("finite", "network") else {}
        records = fn(**kwargs)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "value", "provenance", "status", "note"])
        for r in records:
            w.writerow([r.name, _f(r.value), r.provenance, r.status, r.note])
            run.results[r.name] = {"value": r.value, "provenance": r.provenance, "status": r.status}
            run.console.append(r.line())
        # timings vary between runs; keep them out of the byte-stable CSV
        stable = "".join(line + "\n" for line in buf.getvalue().splitlines()
                         if not line.split(",")[0].endswith("seconds"))
        run.file(f"reproduce_{name}.csv", stable)
        bad = [r.name for r in records if r.status == "FAIL"]
        for b in bad:
            run.fail("E_CHECK_FAILED", b)
        return not bad
    return go


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochabs", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"stochabs {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("abstract", "synthesize", "bounds", "verify-barrier", "compose", "simulate",
                 "validate", "reproduce-paper"):
        sp_ = sub.add_parser(name)
        if name == "reproduce-paper":
            sp_.add_argument("--section", required=True,
                             help="4|5|6|7 or reduced-order|finite|barrier|network")
            sp_.add_argument("config", nargs="?", help="optional config (only [output] is read)")
        else:
            sp_.add_argument("config", help="TOML run configuration")
        sp_.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config value (TOML syntax), repeatable")
        sp_.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")
        sp_.add_argument("--out", help="output directory")
    return p


def _usage_error(code: str, message: str) -> int:
    print(json.dumps({"status": "error", "error": {"code": code, "message": message}}),
          file=sys.stderr)
    return EXIT_USAGE


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.threads < 1:
        return _usage_error("E_USAGE", "--threads must be at least 1")
    try:
        if args.config:
            try:
                text = Path(args.config).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}", "E_USAGE") from exc
            cfg = cfgmod.load_text(text)
        else:
            cfg = {}
        cfg = cfgmod.apply_overrides(cfg, args.set)
        cfgmod.check_blocks(cfg, args.command)
        prep = {
            "abstract": lambda: _prep_abstract(cfg),
            "synthesize": lambda: _prep_synthesize(cfg),
            "bounds": lambda: _prep_bounds(cfg),
            "verify-barrier": lambda: _prep_verify_barrier(cfg),
            "compose": lambda: _prep_compose(cfg),
            "simulate": lambda: _prep_simulate(cfg, args.threads),
            "validate": lambda: _prep_validate(cfg, args.threads),
            "reproduce-paper": lambda: _prep_reproduce(str(args.section)),
        }[args.command]
        go = prep()
    except ConfigError as exc:
        return _usage_error(exc.code, str(exc))
    except (ValueError, UnsupportedModel) as exc:
        return _usage_error("E_CONFIG", str(exc))

    out = Path(args.out or cfg.get("output", {}).get("dir") or os.environ.get(ENV_OUT)
               or "stochabs-out")
    run = Run(args.command, cfg, out, args.threads, argv)
    try:
        ok = go(run)
        status, code = ("ok", EXIT_OK) if ok else ("verification-failed", EXIT_FAILED)
    except AbstractionTooLarge as exc:
        run.fail("E_TOO_LARGE", str(exc))
        run.results["sizing"] = {"value": exc.report, "provenance": "derived"}
        status, code = "error", EXIT_USAGE
    except InsufficientSamples as exc:
        run.fail("E_INSUFFICIENT_SAMPLES", str(exc))
        run.results["required_n"] = {"value": exc.required, "provenance": "derived"}
        status, code = "error", EXIT_USAGE
    except (UnsupportedModel, ValueError) as exc:
        run.fail("E_UNSUPPORTED" if isinstance(exc, UnsupportedModel) else "E_INVALID", str(exc))
        status, code = "error", EXIT_USAGE
    run.commit(status)
    for line in run.console:
        print(line)
    for f in run.failures:
        print(f"error {f['code']}: {f['message']}", file=sys.stderr)
    print(f"status={status} out={out}")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
