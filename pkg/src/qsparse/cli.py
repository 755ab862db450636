"""Command-line front end: ``qsparse <command> [options]``.

Every output file starts with a header that records the manifest hash and the
seed (a ``#`` comment line for CSV, top-level keys for JSON). Outputs depend
only on the manifest, so reruns are byte-identical.
"""

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .accel import load_arch, simulate_run
from .errors import ConfigError, DomainError, FormatError
from .netspec import (
    PrecisionPair, _run, assign_mixed_precision, load_network, read_config_text,
    savings_report, sensitivity_sweep, synthetic_weights, uniform_precision,
)
from .quant import FORMATS, code_utilization, quantize, sqnr
from .sparsity import (
    TraceGenParams, apply_update_schedule, generate_trace, parse_trace, serialize_trace,
    sparse_portion_sparsity, trace_to_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT = 0, 2, 3
DEFAULT_NETWORK = "edm1-cifar10-desk"
REPORT_FORMATS = ("fp16", "int8", "mxint8", "int4", "int4-vsq", "int4-fp8s")
GEN_FIELDS = ("channels", "timesteps", "target_mean", "persistence", "sparse_state_sparsity",
              "dense_state_sparsity", "height", "width")


@dataclass
class ExperimentManifest:
    command: str
    config: str = DEFAULT_NETWORK
    arch: str | None = None
    trace: str | None = None
    generator: dict = field(default_factory=dict)
    policy: str = "mixed"
    threshold: float = 0.30
    period: int = 1
    seed: int = 0
    out: str = "qsparse-out"
    format: str = "csv"
    extra: dict = field(default_factory=dict)

    def digest(self):
        """Hash of everything that determines the results (not of where they go)."""
        doc = asdict(self)
        doc.pop("out")
        doc["config"] = _sha(read_config_text(self.config).encode())
        if self.arch:
            doc["arch"] = _sha(_read_bytes(self.arch))
        if self.trace:
            doc["trace"] = _sha(_read_bytes(self.trace))
        return _sha(json.dumps(doc, sort_keys=True).encode())[:16]


def _sha(data):
    return hashlib.sha256(data).hexdigest()


def _read_bytes(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    return p.read_bytes()


# -- output -------------------------------------------------------------------


def _cell(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return ""
        return repr(v)
    return "" if v is None else str(v)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def _csv_text(rows, columns, man, digest):
    buf = io.StringIO()
    buf.write(f"# manifest={digest} seed={man.seed} command={man.command}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def _json_text(payload, man, digest):
    doc = {"manifest_hash": digest, "seed": man.seed, "command": man.command}
    doc.update(payload)
    return json.dumps(_json_value(doc), indent=2, sort_keys=True) + "\n"


def _write(man, name, text):
    out = Path(man.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    if isinstance(text, bytes):
        path.write_bytes(text)
    else:
        path.write_text(text)
    return path


def _emit_table(man, stem, rows, columns, extra=None):
    digest = man.digest()
    if man.format == "json":
        payload = {"rows": rows, **(extra or {})}
        return _write(man, f"{stem}.json", _json_text(payload, man, digest))
    return _write(man, f"{stem}.csv", _csv_text(rows, columns, man, digest))


# -- shared setup -----------------------------------------------------------------


def _precision(net, policy):
    if policy == "mixed":
        return assign_mixed_precision(net)
    if policy not in FORMATS:
        raise ConfigError(f"unknown precision policy {policy!r}")
    return uniform_precision(net, policy)


def _gen_params(man, seed=None):
    try:
        return TraceGenParams(seed=man.seed if seed is None else seed, keep_tensors=False,
                              **man.generator)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _trace(man, seed=None):
    if man.trace:
        return parse_trace(_read_bytes(man.trace))
    return generate_trace(_gen_params(man, seed))


def _setup(man):
    net = load_network(man.config)
    return net, _precision(net, man.policy), load_arch(man.arch)


def _sim_row(net, pmap, arch, trace, threshold, period):
    sched = apply_update_schedule(trace, threshold, period)
    res = simulate_run(net, pmap, trace, sched, arch)
    return res, {
        "speedup_sparsity": res.speedup_sparsity,
        "speedup_quant": res.speedup_quant,
        "speedup_total": res.speedup_total,
        "energy_saving": res.energy_saving,
        "sparse_portion_sparsity": sparse_portion_sparsity(trace, sched),
        "load_balance": res.load_balance,
    }


# -- commands -------------------------------------------------------------------


def cmd_quantize_report(man):
    """SQNR, code usage and savings per weight/activation format."""
    net = load_network(man.config)
    convs = net.conv_blocks
    if not convs:
        raise ConfigError("quantize-report needs conv blocks")
    x0, weights = synthetic_weights(net, man.seed)
    fp = PrecisionPair.of("fp16")
    reference = _run(net, x0, weights, {b.name: fp for b in convs})

    policies = [(f, uniform_precision(net, f)) for f in REPORT_FORMATS]
    policies.append(("mixed", assign_mixed_precision(net)))
    rows = []
    for name, pmap in policies:
        pairs = {b.name: pmap[b.name] for b in convs}
        y = _run(net, x0, weights, pairs)
        comp, mem = savings_report(net, pmap)
        act = pairs[convs[0].name].act
        codes = None if act.passthrough else code_utilization(quantize(x0, act))[0]
        rows.append({"format": name, "sqnr_db": sqnr(reference, y), "codes_used": codes,
                     "comp_saving": comp, "mem_saving": mem})
    return _emit_table(man, "quantize_report", rows,
                       ["format", "sqnr_db", "codes_used", "comp_saving", "mem_saving"])


def cmd_sensitivity(man):
    """Per-block SQNR with that block at 4-bit and the rest at 8-bit."""
    net = load_network(man.config)
    scores = sensitivity_sweep(net, seed=man.seed)
    order = sorted(scores, key=lambda n: scores[n])
    sensitive = set(net.sensitive or net.default_sensitive())
    rows = [{"block": n, "sqnr_db": s, "rank": order.index(n) + 1, "sensitive": n in sensitive}
            for n, s in scores.items()]
    return _emit_table(man, "sensitivity", rows, ["block", "sqnr_db", "rank", "sensitive"])


def cmd_tracegen(man):
    """Synthesize a trace; writes the binary trace plus a CSV/JSON summary."""
    params = TraceGenParams(seed=man.seed, keep_tensors=man.extra.get("tensors", False),
                            **man.generator)
    trace = generate_trace(params)
    path = _write(man, "trace.sqdm", serialize_trace(trace))
    digest = man.digest()
    if man.format == "json":
        doc = {"trace_file": path.name, "params": asdict(params),
               "sparsity": trace.sparsity.astype(float).tolist()}
        _write(man, "trace.json", _json_text(doc, man, digest))
    else:
        header = f"# manifest={digest} seed={man.seed} command={man.command}\n"
        _write(man, "trace.csv", trace_to_csv(trace, header))
    return path


def cmd_simulate(man):
    net, pmap, arch = _setup(man)
    trace = _trace(man)
    res, row = _sim_row(net, pmap, arch, trace, man.threshold, man.period)
    digest = man.digest()
    if man.format == "json":
        payload = {"summary": res.summary(), **row, "per_timestep": res.per_timestep,
                   "per_layer": res.per_layer}
        return _write(man, "simulate.json", _json_text(payload, man, digest))
    summary = {**res.summary(), **row}
    flat = {k: v for k, v in summary.items() if not isinstance(v, dict)}
    _write(man, "simulate_timesteps.csv",
           _csv_text(res.per_timestep, list(res.per_timestep[0]), man, digest))
    return _write(man, "simulate.csv", _csv_text([flat], list(flat), man, digest))


def cmd_sweep(man):
    """Long-form table with one row per axis value, averaged over replicate traces."""
    axis, values = man.extra["axis"], man.extra["values"]
    replicates = man.extra.get("replicates", 1)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if replicates < 1 or (man.trace and replicates > 1):
        raise ConfigError("replicates must be >= 1 and need a generated trace")
    net, pmap, arch = _setup(man)
    traces = [_trace(man, man.seed + i) for i in range(replicates)]
    rows = []
    for v in values:
        threshold = v if axis == "threshold" else man.threshold
        period = int(v) if axis == "period" else man.period
        if axis == "period" and period != v:
            raise ConfigError(f"update period must be an integer, got {v}")
        cells = [_sim_row(net, pmap, arch, tr, threshold, period)[1] for tr in traces]
        row = {"axis": axis, "value": v}
        for k in cells[0]:
            row[k] = float(np.mean([c[k] for c in cells]))
        rows.append(row)
    cols = ["axis", "value", "speedup_sparsity", "speedup_total", "sparse_portion_sparsity",
            "load_balance", "energy_saving"]
    return _emit_table(man, f"sweep_{axis}", rows, cols)


COMMANDS = {
    "quantize-report": cmd_quantize_report,
    "sensitivity": cmd_sensitivity,
    "tracegen": cmd_tracegen,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
}


# -- argument parsing ----------------------------------------------------------------


def _add_globals(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(DEFAULT_NETWORK),
                   help="network config file or bundled name")
    p.add_argument("--arch", default=d(None), help="accelerator config file")
    p.add_argument("--trace", default=d(None), help="trace file (otherwise generated)")
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--out", default=d("qsparse-out"), help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default=d("csv"))


def _add_run_opts(p):
    p.add_argument("--policy", default="mixed", help="'mixed' or a format name for all blocks")
    p.add_argument("--threshold", type=float, default=0.30)
    p.add_argument("--period", type=int, default=1)


def _add_gen_opts(p):
    for name in GEN_FIELDS:
        kind = int if name in ("channels", "timesteps", "height", "width") else float
        p.add_argument("--" + name.replace("_", "-"), type=kind, default=None, dest=name)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad value list {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="qsparse", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    parents = argparse.ArgumentParser(add_help=False)
    _add_globals(parents, suppress=True)

    sub.add_parser("quantize-report", parents=[parents], help="per-format quality and savings")
    sub.add_parser("sensitivity", parents=[parents], help="per-block 4-bit sensitivity")
    p = sub.add_parser("tracegen", parents=[parents], help="generate a sparsity trace")
    _add_gen_opts(p)
    p.add_argument("--tensors", action="store_true", help="store full activation tensors")
    p = sub.add_parser("simulate", parents=[parents], help="run the accelerator model")
    _add_run_opts(p)
    _add_gen_opts(p)
    p = sub.add_parser("sweep", parents=[parents], help="sweep threshold or update period")
    _add_run_opts(p)
    _add_gen_opts(p)
    p.add_argument("--axis", choices=("threshold", "period"), required=True)
    p.add_argument("--values", type=_float_list, required=True, help="comma-separated values")
    p.add_argument("--replicates", type=int, default=1,
                   help="number of generated traces (seeds seed, seed+1, ...) to average")
    return parser


def manifest_from_args(args):
    man = ExperimentManifest(command=args.command, config=args.config, arch=args.arch,
                             trace=args.trace, seed=args.seed, out=args.out, format=args.format)
    man.generator = {k: getattr(args, k) for k in GEN_FIELDS if getattr(args, k, None) is not None}
    for k in ("policy", "threshold", "period"):
        if hasattr(args, k):
            setattr(man, k, getattr(args, k))
    for k in ("axis", "values", "replicates", "tensors"):
        if hasattr(args, k):
            man.extra[k] = getattr(args, k)
    return man


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        man = manifest_from_args(args)
        path = COMMANDS[args.command](man)
    except FormatError as exc:
        print(f"qsparse: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, DomainError, yaml.YAMLError) as exc:
        print(f"qsparse: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
