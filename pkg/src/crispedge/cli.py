"""Command-line front end: dataset generation, training, inference,
benchmark evaluation, gradient checking, and loss ablations.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numeric.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import (
    gen_synthetic,
    load_dataset,
    load_manifest,
    read_crb,
    read_raster,
    save_dataset,
    write_crb,
)
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    ParseError,
    ShapeError,
    TopologyError,
    TrainingError,
    ValidationError,
)
from .evalbench import (
    eval_criteria,
    fmt,
    pr_curve_csv,
    score_block,
    tolerance_pixels,
)
from .losses import (
    AdaptiveLossState,
    AnnotationSet,
    adaptive_loss,
    batch_weight_maps,
)
from .network import (
    ScaleSet,
    NetworkTopology,
    RefineBlockSpec,
    StageSpec,
    build_refine_net,
    default_topology,
    predict,
    predict_multiscale,
)
from .tensorcore import (
    OptimizerConfig,
    Tensor,
    backward,
    bilinear_resize,
    conv2d,
)
from . import tensorcore as tc
from .trainer import TrainConfig, ablation_csv, ablation_run, loss_trace_csv, train

DEFAULTS = {
    "gen.count": "200",
    "gen.height": "64",
    "gen.width": "64",
    "gen.annotators": "3",
    "gen.jitter_px": "1.0",
    "train.batch_size": "10",
    "train.epochs": "40",
    "train.loss_mode": "awl",
    "train.manual_kappa": "1.0",
    "train.manual_tau": "1.0",
    "train.lr_decay_epochs": "30",
    "train.holdout_fraction": "0.2",
    "train.eval_fraction": "0.05",
    "opt.learning_rate": "0.01",
    "opt.momentum": "0.9",
    "opt.weight_decay": "0.0001",
    "opt.lr_decay": "0.1",
    "loss.epsilon": "1e-6",
    "loss.zeta": "0.1",
    "loss.clamp": "1e-6",
    "eval.max_dist_fraction": "0.0075",
    "eval.n_thresholds": "33",
    "net.topology": "default",
    "infer.scales": "",
}


class CliConfig:
    """Defaults overlaid by a `key = value` file, overlaid by flags."""

    def __init__(self, values):
        self.values = values

    @classmethod
    def load(cls, config_path, overrides):
        values = dict(DEFAULTS)
        if config_path is not None:
            values.update(cls._parse_file(config_path))
        for key, val in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            values[key] = str(val)
        return cls(values)

    @staticmethod
    def _parse_file(path):
        try:
            with open(path, "r", encoding="ascii") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        out = {}
        for lineno, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = stripped.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            out[key] = val.strip()
        return out

    def show(self):
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values))

    def get_str(self, key):
        return self.values[key]

    def get_int(self, key):
        try:
            return int(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"config key '{key}' wants an integer, "
                              f"got '{self.values[key]}'") from exc

    def get_float(self, key):
        try:
            return float(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"config key '{key}' wants a number, "
                              f"got '{self.values[key]}'") from exc

    def get_int_list(self, key):
        raw = self.values[key].strip()
        if not raw:
            return ()
        try:
            return tuple(int(p) for p in raw.split(","))
        except ValueError as exc:
            raise ConfigError(f"config key '{key}' wants comma-separated integers, "
                              f"got '{raw}'") from exc

    def get_float_list(self, key):
        raw = self.values[key].strip()
        if not raw:
            return ()
        try:
            return tuple(float(p) for p in raw.split(","))
        except ValueError as exc:
            raise ConfigError(f"config key '{key}' wants comma-separated numbers, "
                              f"got '{raw}'") from exc


def _topology_from(cfg):
    name = cfg.get_str("net.topology")
    if name != "default":
        raise ConfigError(f"net.topology supports only 'default', got '{name}'")
    return default_topology()


def _flat_params(net):
    return np.concatenate([p.data.ravel() for p in net.params()])


def _load_params_into(net, path):
    flat = read_crb(path)
    if flat.ndim != 1:
        raise ValidationError(f"{path}: parameter blob must be 1-D, got {flat.ndim}-D")
    params = net.params()
    need = sum(p.data.size for p in params)
    if flat.size != need:
        raise ValidationError(f"{path}: parameter count {flat.size} does not match "
                              f"the network's {need}")
    pos = 0
    for p in params:
        p.data[...] = flat[pos:pos + p.data.size].reshape(p.data.shape)
        pos += p.data.size


def _train_config(cfg, seed):
    opt = OptimizerConfig(
        learning_rate=cfg.get_float("opt.learning_rate"),
        momentum=cfg.get_float("opt.momentum"),
        weight_decay=cfg.get_float("opt.weight_decay"),
        lr_decay=cfg.get_float("opt.lr_decay"),
    )
    from .losses import LossConfig

    loss_cfg = LossConfig(
        epsilon=cfg.get_float("loss.epsilon"),
        zeta=cfg.get_float("loss.zeta"),
        clamp=cfg.get_float("loss.clamp"),
    )
    return TrainConfig(
        batch_size=cfg.get_int("train.batch_size"),
        epochs=cfg.get_int("train.epochs"),
        loss_mode=cfg.get_str("train.loss_mode"),
        manual_kappa=cfg.get_float("train.manual_kappa"),
        manual_tau=cfg.get_float("train.manual_tau"),
        optimizer=opt,
        lr_decay_epochs=cfg.get_int_list("train.lr_decay_epochs"),
        seed=seed,
        holdout_fraction=cfg.get_float("train.holdout_fraction"),
        eval_fraction=cfg.get_float("train.eval_fraction"),
        loss_config=loss_cfg,
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(cfg, args):
    samples = gen_synthetic(
        cfg.get_int("gen.count"),
        (cfg.get_int("gen.height"), cfg.get_int("gen.width")),
        cfg.get_int("gen.annotators"),
        cfg.get_float("gen.jitter_px"),
        seed=args.seed,
    )
    from .trainer import holdout_split

    held = holdout_split([s.id for s in samples], cfg.get_float("train.holdout_fraction"))
    splits = {s.id: ("test" if s.id in held else "train") for s in samples}
    manifest_path = save_dataset(samples, args.out_dir, splits=splits)
    print(f"wrote {len(samples)} samples to {manifest_path}")
    return 0


def _cmd_train(cfg, args):
    dataset = load_dataset(args.manifest)
    config = _train_config(cfg, args.seed)
    net, report = train(dataset, _topology_from(cfg), config)
    os.makedirs(args.out_dir, exist_ok=True)
    params_path = os.path.join(args.out_dir, "params.crb")
    write_crb(params_path, _flat_params(net))
    with open(os.path.join(args.out_dir, "report.csv"), "w", encoding="ascii") as fh:
        fh.write(loss_trace_csv(report))
    if report.scores is not None:
        block = score_block(report.scores)
        with open(os.path.join(args.out_dir, "scores.txt"), "w", encoding="ascii") as fh:
            fh.write(block)
        sys.stdout.write(block)
    print(f"wrote {params_path}")
    return 0


def _cmd_infer(cfg, args):
    net = build_refine_net(_topology_from(cfg), seed=0)
    _load_params_into(net, args.params)
    image = read_raster(args.image)
    scales_raw = args.scales if args.scales is not None else cfg.get_str("infer.scales")
    if str(scales_raw).strip():
        scales = tuple(float(p) for p in str(scales_raw).split(","))
        pred = predict_multiscale(net, image, ScaleSet(scales))
    else:
        pred = predict(net, image)
    out = args.out or (os.path.splitext(args.image)[0] + "-pred.crb")
    write_crb(out, pred)
    print(f"wrote {out}")
    return 0


def _read_prediction(path):
    if path.endswith(".crb"):
        arr = read_crb(path)
        if arr.ndim != 2:
            raise ValidationError(f"{path}: prediction map must be 2-D, got {arr.ndim}-D")
        return arr
    return read_image(path)


def _cmd_eval(cfg, args):
    manifest = load_manifest(args.manifest)
    if not manifest.entries:
        raise ValidationError(f"{args.manifest}: empty manifest")
    preds, anns = [], []
    for entry in manifest.entries:
        preds.append(_read_prediction(entry.image_path))
        maps = [_read_annotation_for_eval(p) for p in entry.ann_paths]
        anns.append(AnnotationSet(maps))
    fraction = cfg.get_float("eval.max_dist_fraction")
    report = eval_criteria(preds, anns, fraction,
                           n_thresholds=cfg.get_int("eval.n_thresholds"),
                           jobs=args.jobs)
    h, w = preds[0].shape
    d0 = tolerance_pixels(h, w, fraction)
    os.makedirs(args.out_dir, exist_ok=True)
    block = score_block(report)
    with open(os.path.join(args.out_dir, "scores.txt"), "w", encoding="ascii") as fh:
        fh.write(block)
    for res in report.results():
        name = os.path.join(args.out_dir, f"pr_{res.scores.criterion}.csv")
        with open(name, "w", encoding="ascii") as fh:
            fh.write(pr_curve_csv(res.curve))
    print(f"d0 = {d0:.2f} px")
    sys.stdout.write(block)
    return 0


def _read_annotation_for_eval(path):
    from .data import read_annotation

    return read_annotation(path)


def _cmd_ablate(cfg, args):
    dataset = load_dataset(args.manifest)
    config = _train_config(cfg, args.seed)
    modes = tuple(args.modes.split(",")) if args.modes else ("sce", "sd", "sce+sd", "awl")
    rows = ablation_run(dataset, _topology_from(cfg), modes, config)
    csv = ablation_csv(rows)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "ablation.csv"), "w", encoding="ascii") as fh:
        fh.write(csv)
    sys.stdout.write(csv)
    return 0


# ---------------------------------------------------------------------------
# gradcheck

_FD_STEP = 1e-5
_FD_LIMIT = 1e-4


def _numeric_grad(f, arr):
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + _FD_STEP
        up = f()
        flat[i] = keep - _FD_STEP
        down = f()
        flat[i] = keep
        g[i] = (up - down) / (2 * _FD_STEP)
    return grad


def _rel_err(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _away_from_kinks(x, pad=0.05):
    return np.where(np.abs(x) < pad, x + 2 * pad, x)


def _gradcheck_cases(seed):
    cases = []

    def op_case(name, make_inputs, forward):
        def runner(k):
            rng = np.random.default_rng([seed, k])
            tensors = make_inputs(rng)
            loss = forward(*tensors)
            backward(loss)
            worst = 0.0
            for t in tensors:
                analytic = t.grad.copy()

                def f(t=t):
                    return forward(*tensors).item()

                worst = max(worst, _rel_err(analytic, _numeric_grad(f, t.data)))
            return worst
        cases.append((name, runner))

    sizes = (1, 2, 5, 4)

    op_case("add", lambda rng: (Tensor(rng.standard_normal(sizes)),
                                Tensor(rng.standard_normal(sizes))),
            lambda a, b: tc.global_sum(tc.square(tc.add(a, b))))
    op_case("mul", lambda rng: (Tensor(rng.standard_normal(sizes)),
                                Tensor(rng.standard_normal(sizes))),
            lambda a, b: tc.global_sum(tc.mul(a, b)))
    op_case("relu", lambda rng: (Tensor(_away_from_kinks(rng.standard_normal(sizes))),),
            lambda a: tc.global_sum(tc.square(tc.relu(a))))
    op_case("sigmoid", lambda rng: (Tensor(rng.standard_normal(sizes)),),
            lambda a: tc.global_sum(tc.square(tc.sigmoid(a))))
    op_case("exp", lambda rng: (Tensor(rng.standard_normal(sizes)),),
            lambda a: tc.global_sum(tc.exp(a)))
    op_case("log", lambda rng: (Tensor(rng.uniform(0.2, 2.0, sizes)),),
            lambda a: tc.global_sum(tc.square(tc.log(a))))
    op_case("square", lambda rng: (Tensor(rng.standard_normal(sizes)),),
            lambda a: tc.global_sum(tc.square(a)))
    op_case("reciprocal", lambda rng: (Tensor(rng.uniform(0.5, 2.0, sizes)),),
            lambda a: tc.global_sum(tc.reciprocal(a)))
    op_case("clip", lambda rng: (Tensor(_away_from_kinks(rng.uniform(-1, 2, sizes) - 0.5) + 0.5),),
            lambda a: tc.global_sum(tc.square(tc.clip(a, 0.0, 1.0))))
    op_case("conv2d", lambda rng: (Tensor(rng.standard_normal((1, 2, 6, 6))),
                                   Tensor(rng.standard_normal((3, 2, 3, 3)))),
            lambda x, k: tc.global_sum(tc.square(conv2d(x, k, stride=1, padding=1))))
    op_case("bilinear_resize", lambda rng: (Tensor(rng.standard_normal((1, 2, 5, 5))),),
            lambda x: tc.global_sum(tc.square(bilinear_resize(x, 8, 7))))

    return cases


def _composite_case(seed):
    topo = NetworkTopology(
        in_channels=1,
        encoder_stages=(StageSpec(4, 1), StageSpec(8, 2)),
        refine_levels=((RefineBlockSpec("r0", (("enc1", 1), ("enc2", 2)), "adjacent", 4),),),
    )
    net = build_refine_net(topo, seed=seed)
    rng = np.random.default_rng([seed, 99])
    image = Tensor(rng.random((1, 1, 12, 12)))
    ann = (rng.random((12, 12)) > 0.8).astype(float)
    ann[5, 2:10] = 1.0
    wmap = batch_weight_maps([AnnotationSet([ann])])
    awl = AdaptiveLossState()
    params = net.params() + awl.params()

    def forward():
        return adaptive_loss(net.forward(image), wmap, awl)

    loss = forward()
    backward(loss)
    worst = 0.0
    coord_rng = np.random.default_rng([seed, 100])
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.ravel()
        gflat = analytic.ravel()
        idxs = coord_rng.choice(flat.size, size=min(2, flat.size), replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + _FD_STEP
            up = forward().item()
            flat[i] = keep - _FD_STEP
            down = forward().item()
            flat[i] = keep
            numeric = (up - down) / (2 * _FD_STEP)
            scale = max(abs(gflat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(gflat[i] - numeric) / scale)
    return worst


def _cmd_gradcheck(cfg, args):
    worst_overall = 0.0
    for name, runner in _gradcheck_cases(args.seed):
        worst = max(runner(k) for k in range(3))
        worst_overall = max(worst_overall, worst)
        print(f"{name} {fmt(worst)}")
    comp = _composite_case(args.seed)
    worst_overall = max(worst_overall, comp)
    print(f"composite {fmt(comp)}")
    print(f"worst {fmt(worst_overall)}")
    if worst_overall > _FD_LIMIT:
        print(f"crispedge: gradcheck: max relative error {fmt(worst_overall)} "
              f"exceeds {_FD_LIMIT}", file=sys.stderr)
        return 5
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser():
    parser = argparse.ArgumentParser(prog="crispedge",
                                     description="Crisp boundary detection toolkit.")
    subs = parser.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--show-config", action="store_true",
                        help="print the effective configuration and exit")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1)

    sp = subs.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--count", type=int)
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--annotators", type=int)
    sp.add_argument("--jitter", type=float)
    sp.add_argument("--out-dir", default="dataset")

    sp = subs.add_parser("train", help="train the refinement network")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--loss-mode")
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--out-dir", default="train-out")

    sp = subs.add_parser("infer", help="run the network on one image")
    common(sp)
    sp.add_argument("--params", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--scales", help="comma-separated scale factors, e.g. 0.5,1,2")
    sp.add_argument("--out")

    sp = subs.add_parser("eval", help="benchmark predictions against annotations")
    common(sp, jobs=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--max-dist-fraction", type=float)
    sp.add_argument("--n-thresholds", type=int)
    sp.add_argument("--out-dir", default="eval-out")

    sp = subs.add_parser("gradcheck", help="finite-difference gradient audit")
    common(sp)

    sp = subs.add_parser("ablate", help="train once per loss mode and compare")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--modes", help="comma-separated loss modes")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out-dir", default="ablate-out")

    return parser


_FLAG_KEYS = {
    "count": "gen.count",
    "height": "gen.height",
    "width": "gen.width",
    "annotators": "gen.annotators",
    "jitter": "gen.jitter_px",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "loss_mode": "train.loss_mode",
    "learning_rate": "opt.learning_rate",
    "max_dist_fraction": "eval.max_dist_fraction",
    "n_thresholds": "eval.n_thresholds",
}

_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}

_DATA_ERRORS = (ParseError, ValidationError, ShapeError, FileNotFoundError,
                IsADirectoryError, PermissionError)
_CONFIG_ERRORS = (ConfigError, ContractError, TopologyError)
_NUMERIC_ERRORS = (DomainError, TrainingError, FloatingPointError, OverflowError)


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    sub = args.command
    try:
        overrides = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items()
                     if getattr(args, flag, None) is not None}
        cfg = CliConfig.load(args.config, overrides)
        if args.show_config:
            print(cfg.show())
            return 0
        return _COMMANDS[sub](cfg, args)
    except _CONFIG_ERRORS as exc:
        print(f"crispedge: {sub}: {exc}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as exc:
        print(f"crispedge: {sub}: {exc}", file=sys.stderr)
        return 4
    except _NUMERIC_ERRORS as exc:
        print(f"crispedge: {sub}: {exc}", file=sys.stderr)
        return 5


def main():
    sys.exit(run(sys.argv[1:]))
