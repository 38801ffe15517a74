"""``riskgrid`` command line: synth, split, train, eval, explain, screen, project.

Exit codes: 0 success, 2 usage error, 3 data error, 4 model or
compatibility error. Every command writes its outputs through a temp file
and rename, then drops a ``<output>.manifest.json`` next to the primary
output.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as C
from . import dataset as D
from . import explain as E
from . import metrics
from .estimators import (BaseDNNClassifier, MMOEClassifier, QIDNNClassifier,
                         TopFeatureSelector, parse_pairs_option)
from .exceptions import ConfigurationError, DataError, RiskgridError

logger = logging.getLogger("riskgrid")

STATE_LABELS = ("low-risk", "medium-risk", "high-risk", "attack")
MODELS = {"base-dnn": BaseDNNClassifier, "qidnn": QIDNNClassifier,
          "mmoe": MMOEClassifier}
TRAIN_KEYS = {"learning_rate", "max_epochs", "batch_size", "patience",
              "validation_fraction", "zero_init_output"}
PATH_ARGS = {"out", "data", "train_out", "test_out", "model_path", "config",
             "out_svg", "out_json"}
MODEL_KEYS = {
    "base-dnn": {"hidden_dim", "viz_dim"},
    "qidnn": {"latent_len", "qi_mode", "viz_layer", "hidden_dim",
              "screen_samples"},
    "mmoe": {"latent_len", "qi_mode", "expert_width", "trunk_hidden",
             "experts", "viz_layer", "objective_weights", "screen_samples"},
}


# -- output plumbing ------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
            if epoch else _dt.datetime.now(_dt.timezone.utc))
    return when.replace(microsecond=0).isoformat()


def atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class Run:
    """Collects outputs and writes them, plus a manifest, only on success."""

    def __init__(self, command: str, args: argparse.Namespace,
                 inputs=(), config: dict | None = None):
        self.command = command
        self.seed = getattr(args, "seed", None)
        self.config = config if config is not None else _args_snapshot(args)
        self.inputs = [Path(p) for p in inputs if p is not None]
        self.outputs: dict[Path, str] = {}
        self.started = _timestamp()

    def add(self, path, text: str) -> None:
        self.outputs[Path(path)] = text

    def commit(self) -> None:
        if not self.outputs:
            return
        for path in self.outputs:
            if not path.parent.is_dir():
                raise OSError(f"output directory {str(path.parent)!r} does "
                              "not exist")
        primary = next(iter(self.outputs))
        base = primary.parent
        manifest = {
            "command": self.command,
            "riskgrid_version": __version__,
            "seed": self.seed,
            "config": {k: _rel(Path(v), base) if k in PATH_ARGS and v else v
                       for k, v in self.config.items()},
            "inputs": {_rel(p, base): _sha256(p.read_bytes())
                       for p in self.inputs},
            "outputs": {_rel(p, base): _sha256(t.encode("utf-8"))
                        for p, t in self.outputs.items()},
            "timestamps": {"started": self.started,
                           "finished": _timestamp()},
        }
        for path, text in self.outputs.items():
            atomic_write(path, text)
        atomic_write(manifest_path(primary),
                     json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _rel(path: Path, base: Path) -> str:
    return os.path.relpath(path, base).replace(os.sep, "/")


def _args_snapshot(args) -> dict:
    skip = {"func", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# -- argument helpers -------------------------------------------------------------------

def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _open_fraction(text: str) -> float:
    v = _fraction(text)
    if v in (0.0, 1.0):
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _ratios(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.replace(":", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}") from None
    if len(vals) != 4 or min(vals) <= 0:
        raise argparse.ArgumentTypeError("need four positive ratios")
    return vals


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: expected a JSON object")
    return cfg


def _schema_from_config(cfg: dict) -> D.FeatureSchema:
    if "schema" not in cfg:
        return D.default_schema()
    try:
        return C.schema_from_dict(cfg["schema"])
    except (KeyError, TypeError):
        raise ConfigurationError("config 'schema' must be a list of "
                                 "{abbrev, kind} objects") from None


def _parse_pairs(text: str | None, names: list[str]):
    """``auto:N`` passes through; ``A:B,C:D`` (names or indices) -> index pairs."""
    if text is None or text.startswith("auto:"):
        parse_pairs_option(text)
        return text
    pairs = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 2:
            raise ConfigurationError(f"bad pair {item!r}; use A:B")
        idx = []
        for part in parts:
            if part in names:
                idx.append(names.index(part))
            elif part.isdigit() and int(part) < len(names):
                idx.append(int(part))
            else:
                raise ConfigurationError(
                    f"pair member {part!r} is not a model input")
        pairs.append(tuple(idx))
    return pairs


# -- commands ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = D.SynthConfig(n=args.n, class_ratios=args.ratios,
                           interaction_strength=args.interaction_strength,
                           noise=args.noise, seed=args.seed)
    ds = D.synth(config)
    run = Run("synth", args)
    run.add(args.out, D.csv_text(ds))
    run.commit()
    counts = ds.class_counts()
    print(f"wrote {len(ds)} rows to {args.out} (class counts "
          + ":".join(str(int(c)) for c in counts) + ")")
    return 0


def cmd_split(args) -> int:
    ds = D.load_csv(args.data)
    train, test = D.split(ds, args.test_fraction, args.seed)
    run = Run("split", args, inputs=[args.data])
    run.add(args.train_out, D.csv_text(train))
    run.add(args.test_out, D.csv_text(test))
    run.commit()
    print(f"train {len(train)} rows, test {len(test)} rows")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    schema = _schema_from_config(cfg)
    ds = D.load_csv(args.data, schema)
    train_kw = {k: cfg[k] for k in TRAIN_KEYS & cfg.keys()}
    model_kw = {k: cfg[k] for k in MODEL_KEYS[args.model] & cfg.keys()}
    unknown = set(cfg) - TRAIN_KEYS - MODEL_KEYS[args.model] - {"schema"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")

    stats = D.fit_stats(ds)
    X = D.normalize(D.impute(ds, stats), stats).X
    y = ds.risk_state
    indices = list(range(len(schema)))
    if args.top_k_features is not None:
        sel = TopFeatureSelector(args.top_k_features, random_state=args.seed,
                                 train_kwargs=train_kw).fit(X, y)
        indices = [int(i) for i in sel.support_]
        X = X[:, indices]
    names = [schema.names[i] for i in indices]

    if args.model != "base-dnn":
        pairs = _parse_pairs(args.qi_pairs, names)
        if pairs is None and args.model == "qidnn":
            present = [names.index(f) for f in D.DEFAULT_QI_FEATURES
                       if f in names]
            if len(present) < 2:
                raise ConfigurationError(
                    "too few default interaction features among the inputs; "
                    "pass --qi-pairs")
            model_kw["qi_features"] = present
        elif pairs is not None:
            model_kw["qi_pairs"] = pairs
    elif args.qi_pairs is not None:
        raise ConfigurationError("--qi-pairs does not apply to base-dnn")

    est = MODELS[args.model](random_state=args.seed, **train_kw, **model_kw)
    est.fit(X, y)
    ckpt = C.from_estimator(est, schema, stats, indices, seed=args.seed,
                            qi_pairs=_named_pairs(est, names))
    trace_path = Path(args.out).with_suffix(".trace.csv")
    run = Run("train", args, inputs=[args.data, args.config])
    run.add(args.out, C.dumps(ckpt))
    run.add(trace_path, est.trace_.to_csv())
    run.commit()
    t = est.trace_
    print(f"trained {args.model} ({est.n_params()} parameters) on "
          f"{len(names)} features; best epoch {t.best_epoch}, stopped at "
          f"{t.stopped_at_epoch}")
    if ckpt.training.get("qi_pairs"):
        print("interaction pairs: " + ", ".join(
            f"{a}x{b}" for a, b in ckpt.training["qi_pairs"]))
    return 0


def _named_pairs(est, names):
    pairs = getattr(est, "qi_pairs_", None)
    if not pairs:
        return None
    return [[names[i], names[j]] for i, j in pairs]


def cmd_eval(args) -> int:
    ckpt = C.load(args.model_path)
    ds = ckpt.read_csv(args.data)
    X = ckpt.inputs(ds)
    pred = metrics.predict_labels(ckpt.logits(X))
    rep = metrics.report(ds.risk_state, pred)
    result = {"model_kind": ckpt.model_kind, "n_samples": len(ds),
              "risk_state": rep.to_dict()}
    print(rep.to_text())
    if ckpt.model_kind == "mmoe":
        stroke = ds.stroke
        if 0 < stroke.sum() < stroke.size:
            br = metrics.binary_report(ckpt.stroke_probability(X), stroke)
            result["stroke"] = br.to_dict()
            print("\nStroke occurrence")
            print(br.to_text())
        else:
            print("\nStroke occurrence: AUC undefined (one class present)")
            result["stroke"] = None
    if args.out:
        run = Run("eval", args, inputs=[args.model_path, args.data])
        run.add(args.out, _json(result))
        run.commit()
    return 0


def _svg_path(base, state: str) -> Path:
    base = Path(base)
    return base.with_name(f"{base.stem}_{state}{base.suffix or '.svg'}")


def cmd_explain(args) -> int:
    ckpt = C.load(args.model_path)
    ds = ckpt.read_csv(args.data)
    hits = np.flatnonzero(ds.sample_ids == args.sample_id)
    if hits.size == 0:
        raise DataError(f"no sample with id {args.sample_id} "
                        f"(ids run 0..{len(ds) - 1})")
    row = int(hits[0])
    X = ckpt.inputs(ds.take([row]))
    x = X[0]
    raw = D._impute_array(ds.X[[row]], ckpt.schema.kinds, ckpt.stats)[0]
    raw = raw[list(ckpt.feature_indices)]
    vf = E.ValueFunction(ckpt.logits, ckpt.baseline(),
                         target_names=metrics.STATE_NAMES)
    if vf.p <= E.MAX_EXACT_FEATURES:
        phi, base, pred = E.exact_phi(vf, x)
    else:
        phi, base, pred = E.sampled_phi(vf, x, args.n_permutations, args.seed)
    exps = [E.Explanation(args.sample_id, metrics.STATE_NAMES[t], base[t],
                          phi[t], pred[t], raw, ckpt.feature_names)
            for t in range(len(metrics.STATE_NAMES))]
    probs = ckpt.probabilities(X)[0]
    top, second, flagged = E.transition_tendency(probs, args.threshold)

    run = Run("explain", args, inputs=[args.model_path, args.data])
    run.add(args.out_json, _json({
        "sample_id": int(args.sample_id),
        "model_kind": ckpt.model_kind,
        "predicted_state": metrics.STATE_NAMES[top],
        "probabilities": {n: float(p) for n, p in
                          zip(metrics.STATE_NAMES, probs)},
        "transition_tendency": {
            "flagged": flagged, "toward": metrics.STATE_NAMES[second],
            "threshold": args.threshold},
        "method": ("exact" if vf.p <= E.MAX_EXACT_FEATURES
                   else f"sampled:{args.n_permutations}"),
        "explanations": [e.to_dict() for e in exps],
    }))
    for e in exps:
        run.add(_svg_path(args.out_svg, e.target), E.force_svg(E.force_data(e)))
    run.commit()

    note = (f"transition tendency toward {STATE_LABELS[second]}" if flagged
            else "no transition tendency")
    print(f"sample {args.sample_id}: {STATE_LABELS[top]}, {note}")
    print("scores " + " ".join(f"{n}={p:.4f}"
                               for n, p in zip(metrics.STATE_NAMES, probs)))
    return 0


def cmd_screen(args) -> int:
    if args.model_path:
        ckpt = C.load(args.model_path)
        ds = ckpt.read_csv(args.data)
        X, model, names = ckpt.inputs(ds), ckpt.logits, ckpt.feature_names
        baseline = ckpt.baseline()
    else:
        ds = D.load_csv(args.data)
        (prepared,) = D.prepare(ds)
        X, names = prepared.X, ds.schema.names
        probe = BaseDNNClassifier(random_state=args.seed).fit(X, ds.risk_state)
        model = probe.decision_function
        baseline = D.reference_point(X, ds.schema.kinds)
    mat = E.interaction_matrix(model, X, baseline, n_samples=args.n_samples,
                               n_draws=args.n_draws, seed=args.seed,
                               feature_names=names)
    ranked = mat.ranked()
    if not 1 <= args.top_m <= len(ranked):
        raise ConfigurationError(f"--top-m must lie in 1..{len(ranked)}")
    lines = ["rank,feature_i,feature_j,strength"]
    for r, (i, j, s) in enumerate(ranked[:args.top_m], start=1):
        lines.append(f"{r},{names[i]},{names[j]},{s!r}")
        print(f"{r:>3}  {names[i]} x {names[j]}  {s:.6g}")
    if args.out:
        run = Run("screen", args, inputs=[args.data, args.model_path])
        run.add(args.out, "\n".join(lines) + "\n")
        run.commit()
    return 0


def cmd_project(args) -> int:
    ckpt = C.load(args.model_path)
    ds = ckpt.read_csv(args.data)
    coords = ckpt.viz(ckpt.inputs(ds))
    header = ["sample_id", "state"]
    for name in metrics.STATE_NAMES:
        header += [f"{name}_x", f"{name}_y"]
    lines = [",".join(header)]
    for sid, state, row in zip(ds.sample_ids, ds.risk_state, coords):
        lines.append(",".join([str(int(sid)), metrics.STATE_NAMES[state]]
                              + [repr(float(v)) for v in row]))
    run = Run("project", args, inputs=[args.model_path, args.data])
    run.add(args.out, "\n".join(lines) + "\n")
    run.commit()
    print(f"wrote {len(ds)} projected rows to {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="riskgrid",
        description="Stroke-risk networks (BaseDNN, QIDNN, MMOE) with "
                    "Shapley explanations.")
    p.add_argument("--version", action="version",
                   version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="log per-epoch training losses")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--seed", type=int, default=7,
                        help="seed for every random choice (default 7)")
        sp.set_defaults(func=func)
        return sp

    s = command("synth", cmd_synth, "generate a synthetic cohort CSV")
    s.add_argument("--n", type=int, default=20531)
    s.add_argument("--ratios", type=_ratios, default=D.PAPER_CLASS_COUNTS,
                   help="four class ratios, e.g. 7221,5868,5475,1967")
    s.add_argument("--interaction-strength", type=float, default=1.0)
    s.add_argument("--noise", type=_fraction, default=0.02,
                   help="fraction of rows whose labels are shuffled")
    s.add_argument("--out", required=True)

    s = command("split", cmd_split, "stratified train/test split of a CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--test-fraction", type=_open_fraction, default=0.15)
    s.add_argument("--train-out", required=True)
    s.add_argument("--test-out", required=True)

    s = command("train", cmd_train, "train a model and write a checkpoint")
    s.add_argument("--model", choices=sorted(MODELS), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--qi-pairs",
                   help="auto:N, or explicit pairs like LSBP:TC,Wt:LDBP")
    s.add_argument("--top-k-features", type=_positive_int,
                   help="keep the k features with the largest mean |Shapley|")
    s.add_argument("--config", help="JSON file with training/model settings")
    s.add_argument("--out", required=True, help="checkpoint JSON path")

    s = command("eval", cmd_eval, "print the classification report")
    s.add_argument("--model-path", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="also write the report as JSON")

    s = command("explain", cmd_explain,
                "Shapley force plots and explanation JSON for one sample")
    s.add_argument("--model-path", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--sample-id", type=int, required=True)
    s.add_argument("--out-svg", required=True,
                   help="base path; one SVG per risk state is written")
    s.add_argument("--out-json", required=True)
    s.add_argument("--threshold", type=_open_fraction, default=0.5,
                   help="runner-up/top probability ratio that flags a "
                        "transition tendency")
    s.add_argument("--n-permutations", type=_positive_int,
                   default=E.DEFAULT_PERMUTATIONS)

    s = command("screen", cmd_screen, "rank pairwise feature interactions")
    s.add_argument("--data", required=True)
    s.add_argument("--model-path",
                   help="screen this checkpoint instead of a fresh probe")
    s.add_argument("--top-m", type=_positive_int, default=7)
    s.add_argument("--n-samples", type=_positive_int, default=64)
    s.add_argument("--n-draws", type=_positive_int, default=16)
    s.add_argument("--out", help="CSV of ranked pairs")

    s = command("project", cmd_project,
                "export visualization-layer coordinates")
    s.add_argument("--model-path", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RiskgridError as exc:
        print(f"riskgrid {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"riskgrid {args.command}: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
