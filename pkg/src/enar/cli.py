"""Command-line entry point.

Subcommands: gen-data, train, sample, eval, score, alpha-sweep, head-bakeoff.
Configs are flat JSON files; every key must be recognized, unknown keys are
hard errors. Exit codes: 0 on success, 1 for config or usage errors, 2 when a
run aborts on non-finite numbers.
"""

import argparse
import dataclasses
import json
import sys
import time

import numpy as np

from enar.errors import ConfigError, EnarError, InputError, NumericalAbort, ShapeError
from enar.model import ModelConfig
from enar.oracles import DiagonalGMM, DiagonalGaussian, PointMass, UniformBox
from enar.sampling import SampleConfig, generate_batch
from enar.scoring import ScoringRuleSpec, energy_distance, propriety_probe
from enar.tasks import Dataset, TaskSpec, default_task, gen_synthetic, render
from enar.training import TrainConfig, train

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_TASK_FIELDS = {f.name for f in dataclasses.fields(TaskSpec)}

_REQUIRED = object()


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract wants 1
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


class _Config:
    """A JSON config whose keys must all be consumed."""

    def __init__(self, data, where):
        if not isinstance(data, dict):
            raise ConfigError(f"{where} must hold a JSON object")
        self.data = dict(data)
        self.where = where

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls(json.load(f), path)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e

    def take(self, key, default=_REQUIRED):
        if key in self.data:
            return self.data.pop(key)
        if default is _REQUIRED:
            raise ConfigError(f"{self.where} is missing required key {key!r}")
        return default

    def take_fields(self, fields):
        return {k: self.data.pop(k) for k in list(self.data) if k in fields}

    def finish(self):
        if self.data:
            raise ConfigError(f"unknown keys in {self.where}: {sorted(self.data)}")


def _parse_oracle(entry, where):
    cfg = _Config(entry, where)
    kind = cfg.take("type")
    if kind == "gaussian":
        oracle = DiagonalGaussian(cfg.take("mean"), cfg.take("sigma"))
    elif kind == "gmm":
        oracle = DiagonalGMM(cfg.take("weights"), cfg.take("means"), cfg.take("sigmas"))
    elif kind == "point":
        oracle = PointMass(cfg.take("point"))
    elif kind == "uniform":
        oracle = UniformBox(cfg.take("lo"), cfg.take("hi"))
    else:
        raise ConfigError(f"{where}: unknown oracle type {kind!r}")
    cfg.finish()
    return oracle


def _model_train_from(cfg, spec):
    """Split flat config keys into ModelConfig and TrainConfig, defaulting the
    data-facing model fields from the task spec."""
    model_kwargs = cfg.take_fields(_MODEL_FIELDS)
    train_kwargs = cfg.take_fields(_TRAIN_FIELDS)
    model_kwargs.setdefault("d_token", spec.d_token)
    model_kwargs.setdefault("n_classes", spec.n_classes)
    try:
        mc = ModelConfig(**model_kwargs)
        tc = TrainConfig(**train_kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    if mc.d_token != spec.d_token:
        raise ConfigError(f"model d_token={mc.d_token} but the task uses {spec.d_token}")
    if mc.n_classes < spec.n_classes:
        raise ConfigError(f"model has {mc.n_classes} classes, the task needs {spec.n_classes}")
    return mc, tc


def _sample_config_from(cfg, prefix=""):
    kwargs = {}
    for key, field in (("steps", "steps"), ("cfg_scale", "cfg_scale"),
                       ("cfg_schedule", "cfg_schedule"), ("tau_infer", "tau_infer"),
                       ("sample_seed", "seed"), ("order_seed", "order_seed")):
        v = cfg.take(prefix + key, None)
        if v is not None:
            kwargs[field] = v
    kwargs.setdefault("cfg_scale", 1.0)
    kwargs.setdefault("tau_infer", 1.0)
    return SampleConfig(**kwargs)


def _load_dataset(path):
    from enar import serialization
    return serialization.load_dataset(path)


def _cmd_gen_data(args):
    cfg = _Config.load(args.config)
    kind = cfg.take("kind")
    overrides = cfg.take_fields(_TASK_FIELDS - {"kind"})
    n = cfg.take("n")
    out = args.out if args.out is not None else cfg.take("out")
    cfg.take("out", None)
    cfg.finish()
    spec = default_task(kind, **overrides)
    dataset = gen_synthetic(spec, n)
    from enar import serialization
    serialization.save_dataset(out, dataset)
    print(f"wrote {len(dataset)} {spec.kind} sequences to {out}")
    return 0


def _cmd_train(args):
    cfg = _Config.load(args.config)
    dataset_path = args.dataset if args.dataset is not None else cfg.take("dataset")
    cfg.take("dataset", None)
    checkpoint = cfg.take("checkpoint")
    metrics = cfg.take("metrics", None)
    dataset = _load_dataset(dataset_path)
    mc, tc = _model_train_from(cfg, dataset.spec)
    cfg.finish()
    result = train(dataset, mc, tc, metrics_path=metrics, checkpoint_path=checkpoint)
    last = result.reports[-1] if result.reports else None
    tail = f", final loss {last.loss:.4f}" if last else ""
    print(f"trained {len(result.reports)} steps on {len(dataset)} sequences{tail}")
    print(f"saved checkpoint to {checkpoint}")
    return 0


def _infer_generated_spec(T, d_token, n_classes, seed):
    """Task header for a generated-sample file: records shape and kind, with
    noise_sigma 0 because the data law is the model, not a task."""
    if (T, d_token) == (16, 4):
        return TaskSpec(kind="blobs8", T=T, d_token=d_token, n_classes=n_classes,
                        noise_sigma=0.0, seed=seed)
    if d_token == 2:
        return TaskSpec(kind="gmm-chain", T=T, d_token=d_token, n_classes=n_classes,
                        noise_sigma=0.0, seed=seed)
    raise ConfigError(
        f"generated tokens [{T}, {d_token}] match no known task layout for the dataset header")


def _cmd_sample(args):
    from enar import serialization
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    params, ema, mc, _ = serialization.load_checkpoint(args.checkpoint)
    if args.use_ema and ema is None:
        raise ConfigError(f"{args.checkpoint} carries no EMA tensors")
    use = ema if args.use_ema else params
    sample_config = SampleConfig(
        steps=args.steps, cfg_scale=args.cfg, cfg_schedule=args.cfg_schedule,
        tau_infer=args.tau_infer, seed=args.seed, order_seed=args.order_seed)
    if not 0 <= args.label < mc.n_classes:
        raise ConfigError(f"label must lie in [0, {mc.n_classes}), got {args.label}")
    labels = np.full(args.n, args.label, dtype=np.int64)
    start = time.perf_counter()
    tokens = generate_batch(use, mc, labels, sample_config)
    elapsed = time.perf_counter() - start
    T = tokens.shape[1]
    spec = _infer_generated_spec(T, mc.d_token, mc.n_classes, args.seed)
    dataset = Dataset(spec=spec, tokens=np.asarray(tokens, dtype=np.float32), labels=labels)
    serialization.save_dataset(args.out, dataset)
    print(f"sampled {args.n} sequences in {elapsed:.2f}s "
          f"({elapsed / args.n:.3f}s each), wrote {args.out}")
    if args.render:
        if spec.kind != "blobs8":
            raise ConfigError("--render needs blobs8-shaped tokens ([16, 4] patches)")
        for i in range(args.n):
            path = f"{args.render}.{i}.pgm"
            render(dataset.tokens[i], path=path)
        print(f"rendered {args.n} images to {args.render}.*.pgm")
    return 0


def _cmd_eval(args):
    import csv as _csv

    from enar import serialization
    from enar.evaluate import evaluate, report_rows

    cfg = _Config.load(args.config)
    checkpoint = cfg.take("checkpoint", None)
    generated_path = cfg.take("generated", None)
    if (checkpoint is None) == (generated_path is None):
        raise ConfigError("eval config needs exactly one of 'checkpoint' or 'generated'")
    out = cfg.take("out")
    n_ref = cfg.take("n_ref", 4000)
    eval_seed = cfg.take("eval_seed", 0)
    alpha = cfg.take("alpha", 1.0)
    max_pairwise = cfg.take("max_pairwise", 4096)

    task_overrides = {k: v for k, v in
                      (("n_classes", cfg.take("n_classes", None)),
                       ("noise_sigma", cfg.take("noise_sigma", None)),
                       ("seed", cfg.take("task_seed", None))) if v is not None}
    kind = cfg.take("kind", None)
    gen_seconds = float("nan")

    if generated_path is not None:
        for key in ("n_gen", "steps", "cfg_scale", "cfg_schedule", "tau_infer",
                    "sample_seed", "order_seed", "use_ema"):
            if key in cfg.data:
                raise ConfigError(f"{key!r} only applies when evaluating a checkpoint")
        cfg.finish()
        dataset = serialization.load_dataset(generated_path)
        spec = dataset.spec if kind is None else default_task(
            kind, T=dataset.spec.T, d_token=dataset.spec.d_token,
            n_classes=task_overrides.pop("n_classes", dataset.spec.n_classes))
        spec = dataclasses.replace(spec, **task_overrides)
    else:
        n_gen = cfg.take("n_gen", 1000)
        use_ema = bool(cfg.take("use_ema", False))
        sample_config = _sample_config_from(cfg)
        cfg.finish()
        if kind is None:
            raise ConfigError("evaluating a checkpoint needs the task 'kind'")
        params, ema, mc, _ = serialization.load_checkpoint(checkpoint)
        if use_ema:
            if ema is None:
                raise ConfigError(f"{checkpoint} carries no EMA tensors")
            params = ema
        T = params.tensors["pos_embed"].shape[0] - mc.n_class_tokens
        spec = default_task(kind, T=T, d_token=mc.d_token,
                            n_classes=task_overrides.pop("n_classes", mc.n_classes))
        spec = dataclasses.replace(spec, **task_overrides)
        from enar.experiments import generation_labels
        labels = generation_labels(n_gen, spec.n_classes)
        start = time.perf_counter()
        tokens = generate_batch(params, mc, labels, sample_config)
        gen_seconds = (time.perf_counter() - start) / n_gen
        dataset = Dataset(spec=spec, tokens=np.asarray(tokens, dtype=np.float32),
                          labels=labels)

    report = evaluate(dataset, ref_spec=spec, n_ref=n_ref, seed=eval_seed,
                      alpha=alpha, max_pairwise=max_pairwise,
                      gen_seconds_per_seq=gen_seconds)
    with open(out, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["metric", "value", "std_error"])
        for row in report_rows(report):
            w.writerow(row)
        w.writerow(["elapsed_seconds", f"{report.elapsed_seconds:.3f}", ""])
        w.writerow(["gen_seconds_per_seq", f"{report.gen_seconds_per_seq:.5f}", ""])
    g = report.global_distance
    print(f"global energy distance {g.value:.4f} +- {g.std_error:.4f} "
          f"({report.n_generated} gen vs {report.n_reference} ref), wrote {out}")
    return 0


def _cmd_score(args):
    import csv as _csv

    cfg = _Config.load(args.config)
    mode = cfg.take("mode", "propriety")
    out = cfg.take("out")
    alpha = cfg.take("alpha", 1.0)
    rows = []
    if mode == "propriety":
        rule = ScoringRuleSpec(cfg.take("rule", "energy"), alpha)
        n = cfg.take("n", 100_000)
        seed = cfg.take("seed", 0)
        truth = _parse_oracle(cfg.take("truth"), "truth oracle")
        entries = cfg.take("candidates")
        cfg.finish()
        candidates, ids = [truth], ["truth"]
        for i, entry in enumerate(entries):
            entry = dict(entry)
            ids.append(entry.pop("id", f"cand{i:02d}"))
            candidates.append(_parse_oracle(entry, f"candidate {ids[-1]}"))
        result = propriety_probe(rule, truth, candidates, n,
                                 np.random.default_rng(seed), candidate_ids=ids)
        for r in result.rows:
            rows.append([r.candidate_id, f"{r.estimate.value:.6f}",
                         f"{r.estimate.std_error:.6f}", int(r.is_truth), int(r.is_max)])
        verdict = "truth scored highest" if result.truth_is_max else "TRUTH DID NOT WIN"
        print(f"propriety probe over {len(candidates)} candidates: {verdict}")
    elif mode == "two-sample":
        path_a, path_b = cfg.take("a"), cfg.take("b")
        cfg.finish()
        da, db = _load_dataset(path_a), _load_dataset(path_b)
        if da.tokens.shape[1:] != db.tokens.shape[1:]:
            raise ConfigError("the two datasets disagree on sequence shape")
        flat_a = da.tokens.reshape(len(da), -1).astype(np.float64)
        flat_b = db.tokens.reshape(len(db), -1).astype(np.float64)
        est = energy_distance(flat_a, flat_b, alpha)
        rows.append(["b_vs_a", f"{est.value:.6f}", f"{est.std_error:.6f}", "", ""])
        print(f"energy distance {est.value:.4f} +- {est.std_error:.4f}")
    else:
        raise ConfigError(f"unknown score mode {mode!r}")
    with open(out, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["candidate_id", "score", "std_error", "is_truth", "is_max"])
        w.writerows(rows)
    print(f"wrote {out}")
    return 0


def _cmd_alpha_sweep(args):
    from enar.experiments import alpha_sweep

    cfg = _Config.load(args.config)
    dataset = _load_dataset(cfg.take("dataset"))
    alphas = cfg.take("alphas", [0.5, 1.0, 1.25, 1.5, 1.75, 2.0])
    out = cfg.take("out")
    n_gen = cfg.take("n_gen", 2000)
    n_ref = cfg.take("n_ref", 4000)
    sample_config = _sample_config_from(cfg)
    mc, tc = _model_train_from(cfg, dataset.spec)
    cfg.finish()

    def report(row):
        if row.status == "completed":
            print(f"alpha {row.alpha:<5}: distance {row.global_distance:.4f} "
                  f"+- {row.std_error:.4f}"
                  + ("  [unstable first epoch]" if row.unstable_first_epoch else ""))
        else:
            print(f"alpha {row.alpha:<5}: aborted at epoch {row.abort_epoch}")

    alpha_sweep(dataset, mc, tc, alphas, n_gen=n_gen, n_ref=n_ref,
                sample_config=sample_config, out_csv=out, on_event=report)
    print(f"wrote {out}")
    return 0


def _cmd_head_bakeoff(args):
    from enar.experiments import best_gaussian_distance, head_bakeoff

    cfg = _Config.load(args.config)
    dataset = _load_dataset(cfg.take("dataset"))
    sigmas = cfg.take("sigmas", [0.1, 0.2, 0.4, 0.8])
    gmm_k = cfg.take("gmm_k", 3)
    include_gmm = bool(cfg.take("include_gmm", True))
    out = cfg.take("out")
    n_gen = cfg.take("n_gen", 2000)
    n_ref = cfg.take("n_ref", 4000)
    sample_config = _sample_config_from(cfg)
    mc, tc = _model_train_from(cfg, dataset.spec)
    cfg.finish()

    def report(row):
        sig = "" if np.isnan(row.sigma_infer) else f" sigma={row.sigma_infer}"
        print(f"{row.head:<8}{sig}: distance {row.global_distance:.4f} "
              f"+- {row.std_error:.4f}")

    rows = head_bakeoff(dataset, mc, tc, sigmas=sigmas, gmm_k=gmm_k,
                        include_gmm=include_gmm, n_gen=n_gen, n_ref=n_ref,
                        sample_config=sample_config, out_csv=out, on_event=report)
    energy = next(r.global_distance for r in rows if r.head == "energy")
    best = best_gaussian_distance(rows)
    print(f"energy {energy:.4f} vs best gaussian {best:.4f} "
          f"(ratio {energy / best:.2f})")
    print(f"wrote {out}")
    return 0


def build_parser():
    parser = _Parser(prog="enar", description=__doc__.split("\n", 1)[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's output path")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train the energy model on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", default=None, help="override the config's dataset path")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("sample", help="sample sequences from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg", type=float, default=1.0, help="guidance scale")
    p.add_argument("--cfg-schedule", choices=("constant", "linear"), default="linear")
    p.add_argument("--tau-infer", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--order-seed", type=int, default=1)
    p.add_argument("--n", type=int, default=1, help="number of sequences")
    p.add_argument("--use-ema", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--render", default=None, metavar="PREFIX",
                   help="also write PREFIX.<i>.pgm images (blobs8 shapes only)")
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("eval", help="score generated sequences against the data law")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("score", help="propriety probes and two-sample distances")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_score)

    p = sub.add_parser("alpha-sweep", help="train and score across alpha values")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_alpha_sweep)

    p = sub.add_parser("head-bakeoff", help="energy generator vs baseline heads")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_head_bakeoff)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 2
    except (ConfigError, InputError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except EnarError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
