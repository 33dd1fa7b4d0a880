"""Command-line front end: ``blindfair <subcommand> ...``.

Subcommands
    dealer    write the two parties' triple files
    prepare   turn a CSV (or the synthetic generator) into per-party input bundles
    train     secure fair training
    certify   secure fairness certification of a model
    verify    check a deployed model against a certificate and classify one input
    bench     cleartext optimizer sweeps over the constraint value
    replay    re-run a command from its manifest

``--loopback`` runs both parties in this process; otherwise pass ``--role``
and one of ``--listen`` / ``--connect``.  ``BLINDFAIR_SEED`` overrides every
seed.  Every run writes ``manifest.json`` into ``--out``.

Exit codes: 0 success, 2 usage, 3 signature mismatch, 5 I/O error, and the
``exit_code`` of each :mod:`blindfair.errors` class (listed by
``blindfair --exit-codes``).
"""

from __future__ import annotations

import argparse
import hashlib
import inspect
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine, errors, fxp
from .clearref import TrainingConfig, evaluate, fairness_value, constraint_matrix, train, write_trace
from .dataio import DatasetSpec, SyntheticSpec, gen_synthetic, load_csv
from .dataset import Dataset, Whitening
from .engine import PartyContext, RunRegistry
from .fairmpc import (Certificate, protocol_certify, protocol_train, protocol_verify, share_sensitive,
                      training_budget)
from .shares import TripleStore, dealer_generate, load_store, save_store
from .transport import InProcChannel, Role, accept_tcp, connect_tcp

log = logging.getLogger("blindfair")

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_IO = 0, 2, 3, 5
SEED_ENV = "BLINDFAIR_SEED"
TRIPLE_NAMES = {Role.MODELER: "triples-modeler.bin", Role.REGULATOR: "triples-regulator.bin"}
BUNDLE_NAMES = {Role.MODELER: "modeler.npz", Role.REGULATOR: "regulator.npz"}


def exit_codes() -> dict[str, int]:
    """The stable exit-code table."""
    table = {"OK": EXIT_OK, "Usage": EXIT_USAGE, "SignatureMismatch": EXIT_MISMATCH, "IOError": EXIT_IO}
    for name, cls in inspect.getmembers(errors, inspect.isclass):
        if issubclass(cls, errors.BlindFairError):
            table[name] = cls.exit_code
    return dict(sorted(table.items(), key=lambda kv: kv[1]))


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _seed(value) -> str:
    return os.environ.get(SEED_ENV, str(value))


def _int_seed(value, label: str = "") -> int:
    """A 64-bit seed from ``value`` (or the override) and a fixed per-use label."""
    text = f"{_seed(value)}/{label}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _data_seed(value) -> int:
    """Integer seeds stay as given so runs line up with library calls; other text is hashed."""
    text = _seed(value)
    return int(text) if text.isdigit() else _int_seed(value, "data")


def _digest_file(path) -> Optional[str]:
    p = Path(path)
    if not p.is_file():
        return None
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _read_kv(path) -> dict:
    out = {}
    if path is None:
        return out
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise errors.DataError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _training_config(args) -> TrainingConfig:
    kv = _read_kv(getattr(args, "config", None))
    kw = {}
    if "c" in kv:
        kw["c"] = _floats(kv["c"])
    for key, conv in (("eta_theta", float), ("eta_lambda", float), ("batch_exp", int),
                      ("epochs", int), ("block", int)):
        if key in kv:
            kw[key] = conv(kv[key])
    if "public_seed" in kv:
        kw["public_seed"] = kv["public_seed"].encode()
    if getattr(args, "c", None):
        kw["c"] = _floats(args.c)
    if getattr(args, "epochs", None) is not None:
        kw["epochs"] = args.epochs
    kw["public_seed"] = _seed(kw.get("public_seed", b"blindfair").decode()).encode()
    return TrainingConfig(arithmetic="fixed", sigmoid="secureml", **kw)


class Manifest:
    def __init__(self, args, argv):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.data = {
            "subcommand": args.cmd,
            "argv": list(argv),
            "flags": {k: (v if isinstance(v, (int, float, str, bool, type(None))) else str(v))
                      for k, v in vars(args).items() if k != "func"},
            "seed_override": os.environ.get(SEED_ENV),
            "inputs": {},
            "outputs": [],
        }
        self.t0 = time.perf_counter()

    def input(self, path) -> None:
        if path is not None:
            self.data["inputs"][str(path)] = _digest_file(path)

    def output(self, path) -> Path:
        path = self.out / path
        path.parent.mkdir(parents=True, exist_ok=True)
        self.data["outputs"].append(str(path))
        return path

    def write(self, **extra) -> Path:
        self.data["wall_seconds"] = time.perf_counter() - self.t0
        self.data.update(extra)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, default=str))
        return path


def _triples_for(args, role: Role) -> TripleStore:
    src = getattr(args, "triples", None)
    if src is None:
        return TripleStore.streaming_from_seed(int(role), _seed(args.dealer_seed).encode())
    path = Path(src)
    if path.is_dir():
        path = path / TRIPLE_NAMES[role]
    store = load_store(path)
    if store.party != int(role):
        raise errors.ConfigMismatch(f"{path} holds triples for party {store.party}, not {role.name}")
    return store


def _contexts(args, man: Manifest) -> list[PartyContext]:
    if args.loopback:
        roles = [Role.MODELER, Role.REGULATOR]
        channels = dict(zip(roles, InProcChannel.pair()))
    else:
        if args.role is None or (args.listen is None) == (args.connect is None):
            raise SystemExit("need --role and exactly one of --listen/--connect (or --loopback)")
        role = Role.parse(args.role)
        roles = [role]
        ch = accept_tcp(args.listen, role, args.timeout) if args.listen else connect_tcp(args.connect, role, args.timeout)
        channels = {role: ch}
    ctxs = []
    for role in roles:
        if getattr(args, "triples", None) is not None:
            p = Path(args.triples)
            man.input(p / TRIPLE_NAMES[role] if p.is_dir() else p)
        registry = RunRegistry(Path(f"{args.registry}.{role.name.lower()}")) if args.registry else RunRegistry()
        ctxs.append(PartyContext(role, channels[role], _triples_for(args, role),
                                 public_seed=_seed(args.public_seed).encode(), mode=args.mode,
                                 private_seed=_int_seed(args.private_seed, role.name),
                                 registry=registry))
    return ctxs


def _run(ctxs: list[PartyContext], fns: dict) -> dict:
    """Run each local party's function (after the handshake); returns role -> result."""
    def wrap(fn):
        def inner(ctx):
            engine.handshake(ctx)
            return fn(ctx)
        return inner

    if len(ctxs) == 2:
        res = engine.run_pair(ctxs[0], ctxs[1], wrap(fns[Role.MODELER]), wrap(fns[Role.REGULATOR]))
        return {Role.MODELER: res.modeler, Role.REGULATOR: res.regulator}
    ctx = ctxs[0]
    try:
        return {ctx.role: engine.run_party(ctx, wrap(fns[ctx.role]))}
    finally:
        ctx.channel.close()


def _stats(ctxs) -> dict:
    return {c.role.name.lower(): asdict(c.stats) for c in ctxs}


def _bundle(args, role: Role) -> dict:
    path = Path(args.data)
    if path.is_dir():
        path = path / BUNDLE_NAMES[role]
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_dealer(args, man: Manifest) -> int:
    shapes = []
    for item in args.shapes or []:
        dims = tuple(int(v) for v in item.replace("x", ",").split(","))
        if len(dims) == 3:
            shapes.append(dims)
        elif len(dims) == 4:
            shapes.extend([dims[:3]] * dims[3])
        else:
            raise SystemExit(f"bad --shapes entry {item!r}; use n,k,m or n,k,m,count")
    scalar, and_words = args.scalar, args.and_words
    if args.train_budget:
        n, d, p = (int(v) for v in args.train_budget.split(","))
        budget = training_budget(n, d, p, _training_config(args))
        scalar += budget.scalar
        and_words += budget.and_words
        shapes.extend(budget.shapes())
    seed = _seed(args.seed).encode()
    s1, s2 = dealer_generate(scalar, and_words, shapes, seed)
    for store, role in ((s1, Role.MODELER), (s2, Role.REGULATOR)):
        save_store(store, man.output(TRIPLE_NAMES[role]))
    summary = {"scalar": scalar, "and_words": and_words, "matrix": len(shapes), "run_id": s1.run_id.hex()}
    print(json.dumps(summary))
    man.write(budget=summary)
    return EXIT_OK


def cmd_prepare(args, man: Manifest) -> int:
    if args.csv:
        man.input(args.csv)
        man.input(args.data_config)
        spec = DatasetSpec.from_sidecar(args.csv, args.data_config) if args.data_config else DatasetSpec(Path(args.csv))
        if os.environ.get(SEED_ENV):
            spec.seed = _int_seed(spec.seed, "split")
        tr, te = load_csv(spec)
    else:
        tr, te = gen_synthetic(SyntheticSpec(n=args.n, phi=args.phi, seed=_data_seed(args.seed)),
                               test_n=args.test_n)
    Z1, Z2 = share_sensitive(tr.Z, np.random.default_rng(_int_seed(args.seed, "shares")))
    w = tr.whitening or Whitening.identity(tr.d)
    np.savez(man.output(BUNDLE_NAMES[Role.MODELER]), X=tr.X, y=tr.y, Z_share=Z1, X_test=te.X, y_test=te.y,
             mean=w.mean, scale=w.scale)
    # the regulator also keeps the cleartext test-set sensitive bits for reporting
    np.savez(man.output(BUNDLE_NAMES[Role.REGULATOR]), X=tr.X, y=tr.y, Z_share=Z2, Z_test=te.Z,
             mean=w.mean, scale=w.scale)
    print(json.dumps({"n": tr.n, "d": tr.d, "p": tr.p, "n_test": te.n}))
    man.write(shape={"n": tr.n, "d": tr.d, "p": tr.p, "n_test": te.n})
    return EXIT_OK


def cmd_train(args, man: Manifest) -> int:
    cfg = _training_config(args)
    man.input(args.config)
    ctxs = _contexts(args, man)
    bundles = {c.role: _bundle(args, c.role) for c in ctxs}
    fns = {
        Role.MODELER: lambda ctx: protocol_train(ctx, cfg, bundles[Role.MODELER]["Z_share"],
                                                 bundles[Role.MODELER]["X"], bundles[Role.MODELER]["y"]),
        Role.REGULATOR: lambda ctx: protocol_train(ctx, cfg, bundles[Role.REGULATOR]["Z_share"]),
    }
    t0 = time.perf_counter()
    out = _run(ctxs, fns)
    elapsed = time.perf_counter() - t0
    extra = {"stats": _stats(ctxs), "timing": {"training_min": elapsed / 60.0}, "config": repr(cfg)}
    if Role.MODELER in out:
        theta = out[Role.MODELER]
        man.output("modeler/theta.bin").write_bytes(fxp.to_bytes(theta))
        values = fxp.decode(theta).tolist()
        man.output("modeler/theta.json").write_text(json.dumps(values))
        b = bundles[Role.MODELER]
        acc = float(np.mean((b["X_test"] @ np.asarray(values) >= 0) == b["y_test"]))
        extra["test_accuracy"] = acc
        print(json.dumps({"theta": values, "test_accuracy": acc}))
    man.write(**extra)
    return EXIT_OK


def _load_theta(path) -> np.ndarray:
    return fxp.from_bytes(Path(path).read_bytes())


def cmd_certify(args, man: Manifest) -> int:
    c = _floats(args.c) if args.c else _training_config(args).c
    ctxs = _contexts(args, man)
    bundles = {c_.role: _bundle(args, c_.role) for c_ in ctxs}
    if any(x.role == Role.MODELER for x in ctxs):
        man.input(args.model)
        theta = _load_theta(args.model)
    fns = {
        Role.MODELER: lambda ctx: protocol_certify(ctx, c, bundles[Role.MODELER]["Z_share"], theta=theta),
        Role.REGULATOR: lambda ctx: protocol_certify(
            ctx, c, bundles[Role.REGULATOR]["Z_share"], X=bundles[Role.REGULATOR]["X"],
            whitening=Whitening(bundles[Role.REGULATOR]["mean"], bundles[Role.REGULATOR]["scale"])),
    }
    t0 = time.perf_counter()
    out = _run(ctxs, fns)
    elapsed = time.perf_counter() - t0
    cert = next(iter(out.values()))
    for role, crt in out.items():
        crt.save(man.output(args.cert_out if len(out) == 1 else f"{role.name.lower()}/{args.cert_out}"))
    print(json.dumps({"verdict": cert.verdict, "signature": cert.digest.hex() if cert.passed else None}))
    man.write(stats=_stats(ctxs), timing={"certification_ms": elapsed * 1000.0}, verdict=cert.verdict)
    return EXIT_OK


def cmd_verify(args, man: Manifest) -> int:
    ctxs = _contexts(args, man)
    roles = {c.role for c in ctxs}
    cert = x = theta = None
    if Role.REGULATOR in roles:
        man.input(args.cert_in)
        cert = Certificate.load(args.cert_in)
        x = np.array(_floats(args.x))
    if Role.MODELER in roles:
        man.input(args.model)
        theta = _load_theta(args.model)
    fns = {
        Role.MODELER: lambda ctx: protocol_verify(ctx, theta=theta),
        Role.REGULATOR: lambda ctx: protocol_verify(ctx, certificate=cert, x=x),
    }
    out = _run(ctxs, fns)
    extra = {"stats": _stats(ctxs)}
    code = EXIT_OK
    if Role.REGULATOR in out:
        res = out[Role.REGULATOR]
        extra["result"] = {"signature_match": res.signature_match, "prediction": res.prediction}
        print(json.dumps(extra["result"]))
        if not res.signature_match:
            code = EXIT_MISMATCH
    man.write(**extra)
    return code


BENCH_FIELDS = ["optimizer", "arithmetic", "sigmoid", "c", "status", "accuracy", "ar_z0", "ar_z1",
                "ar_gap", "p_ratio", "max_F", "theta_norm"]


def bench_rows(tr: Dataset, te: Dataset, optimizers, arithmetics, sigmoids, cs, epochs=None,
               trace_dir: Optional[Path] = None) -> list[dict]:
    """Train every configuration at every ``c``; failures become rows, not exceptions."""
    A = constraint_matrix(tr)
    rows = []
    for opt in optimizers:
        for ar in arithmetics:
            if ar == "fixed" and opt != "lagrange":
                continue
            for kind in sigmoids:
                for c in cs:
                    cfg = TrainingConfig(c=(c,) * tr.p, optimizer=opt, arithmetic=ar, sigmoid=kind, epochs=epochs)
                    row = {"optimizer": opt, "arithmetic": ar, "sigmoid": kind, "c": c}
                    try:
                        res = train(tr, cfg, trace=trace_dir is not None)
                    except (errors.BlindFairError, OverflowError, ArithmeticError) as exc:
                        row["status"] = f"failed:{type(exc).__name__}"
                        rows.append(row)
                        continue
                    theta = res.params.theta
                    rep = evaluate(te.X, te.y, te.Z, theta, kind)
                    att = rep.attributes[0]
                    row.update(status="ok", accuracy=rep.accuracy, ar_z0=att.z0.ar, ar_z1=att.z1.ar,
                               ar_gap=att.gaps["ar"], p_ratio=att.p_ratio,
                               max_F=float(np.max(fairness_value(A, theta, cfg.c))),
                               theta_norm=float(np.linalg.norm(theta)))
                    rows.append(row)
                    if trace_dir is not None:
                        write_trace(res.trace, trace_dir / f"{opt}-{ar}-{kind}-c{c:.3g}.csv")
    return rows


def cmd_bench(args, man: Manifest) -> int:
    if args.dataset == "synthetic":
        tr, te = gen_synthetic(SyntheticSpec(n=args.n, phi=args.phi, seed=_data_seed(args.seed)),
                               test_n=args.test_n)
    else:
        man.input(args.dataset)
        man.input(args.data_config)
        spec = (DatasetSpec.from_sidecar(args.dataset, args.data_config) if args.data_config
                else DatasetSpec(Path(args.dataset)))
        tr, te = load_csv(spec)
    lo, hi, steps = args.sweep_c
    cs = [float(v) for v in np.logspace(math.log10(float(hi)), math.log10(float(lo)), int(steps))]
    trace_dir = man.output("traces/.keep").parent if args.traces else None
    rows = bench_rows(tr, te, args.optimizer, args.arithmetic, args.sigmoid, cs, args.epochs, trace_dir)
    import csv
    with open(man.output("bench.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        w.writerows(rows)
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(json.dumps({"rows": len(rows), "failed": failed}))
    man.write(rows=len(rows), failed=failed)
    return EXIT_OK


def cmd_replay(args, man_unused=None) -> int:
    data = json.loads(Path(args.manifest).read_text())
    env = os.environ.copy()
    if data.get("seed_override") is not None:
        os.environ[SEED_ENV] = data["seed_override"]
    try:
        return main(data["argv"])
    finally:
        os.environ.clear()
        os.environ.update(env)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _party_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loopback", action="store_true", help="run both parties in this process")
    p.add_argument("--role", choices=["modeler", "regulator"])
    p.add_argument("--listen", metavar="HOST:PORT")
    p.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--timeout", type=float, default=10.0, help="seconds to wait for the peer")
    p.add_argument("--mode", choices=list(engine.MODES), default="prob", help="truncation mode")
    p.add_argument("--triples", help="triple file, or directory written by 'dealer'")
    p.add_argument("--dealer-seed", default="blindfair-dealer",
                   help="stream triples from this seed when --triples is absent (testing only)")
    p.add_argument("--public-seed", default="blindfair")
    p.add_argument("--private-seed", default="blindfair-private")
    p.add_argument("--data", help="bundle file, or directory written by 'prepare'")
    p.add_argument("--config", help="key=value training configuration")
    p.add_argument("--registry", help="file of run ids already used; a repeated run id aborts")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blindfair", description="Fair learning with secret-shared sensitive attributes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--exit-codes", action="store_true", help="print the exit-code table and exit")
    sub = ap.add_subparsers(dest="cmd")

    p = sub.add_parser("dealer", help="generate triple files for both parties")
    p.add_argument("--scalar", type=int, default=0)
    p.add_argument("--and", dest="and_words", type=int, default=0, help="AND triples, in 64-bit words")
    p.add_argument("--shapes", nargs="*", help="matrix triple shapes n,k,m[,count]")
    p.add_argument("--train-budget", metavar="N,D,P", help="add the exact budget of one training run")
    p.add_argument("--config", help="training configuration used with --train-budget")
    p.add_argument("--epochs", type=int)
    p.add_argument("--c")
    p.add_argument("--seed", default="blindfair-dealer")
    p.add_argument("--out", "--triples-out", dest="out", required=True,
                   help="directory for the two triple files and the manifest")
    p.set_defaults(func=cmd_dealer)

    p = sub.add_parser("prepare", help="build per-party input bundles")
    p.add_argument("--csv")
    p.add_argument("--data-config", help="sidecar key=value column roles")
    p.add_argument("--n", type=int, default=1 << 10)
    p.add_argument("--test-n", type=int, default=1 << 12)
    p.add_argument("--phi", type=float, default=math.pi / 4)
    p.add_argument("--seed", default="0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="secure fair training")
    _party_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--c")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="secure fairness certification")
    _party_flags(p)
    p.add_argument("--model", help="theta.bin (Modeler)")
    p.add_argument("--c")
    p.add_argument("--cert-out", default="certificate.bfct")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("verify", help="decision verification")
    _party_flags(p)
    p.add_argument("--model", help="deployed theta.bin (Modeler)")
    p.add_argument("--cert-in", help="stored certificate (Regulator)")
    p.add_argument("--x", help="comma-separated raw feature vector (Regulator)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="cleartext optimizer sweep over c")
    p.add_argument("--optimizer", nargs="+", default=["lagrange", "projected", "iplb"])
    p.add_argument("--arithmetic", nargs="+", default=["float"])
    p.add_argument("--sigmoid", nargs="+", default=["exact"])
    p.add_argument("--sweep-c", nargs=3, default=["1e-4", "1", "10"], metavar=("LO", "HI", "STEPS"))
    p.add_argument("--dataset", default="synthetic", help="'synthetic' or a CSV path")
    p.add_argument("--data-config")
    p.add_argument("--n", type=int, default=1 << 12)
    p.add_argument("--test-n", type=int, default=1 << 12)
    p.add_argument("--phi", type=float, default=math.pi / 4)
    p.add_argument("--seed", default="1")
    p.add_argument("--epochs", type=int)
    p.add_argument("--traces", action="store_true", help="also write per-epoch trace CSVs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="re-run a command from its manifest.json")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.exit_codes:
        for name, code in exit_codes().items():
            print(f"{code:3d}  {name}")
        return EXIT_OK
    if args.cmd is None:
        ap.print_help()
        return EXIT_USAGE
    try:
        if args.cmd == "replay":
            return cmd_replay(args)
        return args.func(args, Manifest(args, argv))
    except errors.BlindFairError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(f"error: {exc.code}", file=sys.stderr)
            return EXIT_USAGE
        return int(exc.code or 0)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
