"""Command-line surface.

    advlab <train-flow|train|attack|evaluate|curves|synth-data>
        --config <path> [--set section.key=value ...]

Configuration is an INI file with sections named after the modules; any
value can be overridden on the command line with --set (overrides win).
Unknown sections or keys are hard errors. The fully resolved
configuration is written to the output directory before any computation
starts.

Exit codes: 0 success, 2 usage/configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import replace

import numpy as np
import torch

from advlab.attacks import ThreatModel
from advlab.classifier import ClassifierConfig, ClassifierModel, TargetSpec
from advlab.container import write_container
from advlab.data import (
    SyntheticManifoldSpec,
    TensorDataset,
    load_checkpoint,
    load_tensor_dataset,
    save_checkpoint,
    save_tensor_dataset,
    synth_manifold_dataset,
)
from advlab.errors import AdvlabError, ConfigurationError
from advlab.evaluation import (
    default_suite,
    evaluate_robustness,
    run_attack,
    track_training_curves,
)
from advlab.flow.model import FlowConfig, FlowModel, fit_mle
from advlab.rng import seed_for
from advlab.training import TrainConfig, train_classifier

_SCHEMA = {
    "run": {"seed", "output_dir"},
    "data": {
        "dataset", "generator", "generator_kind", "input_shape", "n_classes",
        "n_samples", "latent_margin", "flow_levels", "flow_steps",
        "flow_width", "generator_scale",
    },
    "flow": {
        "levels", "steps_per_level", "hidden_width", "input_shape",
        "dequantization_noise", "logit_input", "logit_margin", "epochs",
        "batch_size", "lr", "checkpoint",
    },
    "classifier": {"arch", "width", "num_classes", "checkpoint"},
    "attack": {
        "kind", "norm", "image_eps", "image_step", "latent_eta",
        "latent_step", "iterations", "random_start",
    },
    "training": {
        "mode", "attack_kind", "epochs", "batch_size", "lr", "momentum",
        "weight_decay", "drop_epochs", "drop_factor", "tau", "eval_samples",
        "probe_eps", "probe_iterations",
    },
    "evaluation": {"suite_eps", "suite_eta", "max_samples"},
}


class RunConfig:
    """Merged file + override view with typed accessors."""

    def __init__(self):
        self.values: dict[tuple[str, str], str] = {}

    @staticmethod
    def load(path: str | None, overrides: list[str]) -> "RunConfig":
        cfg = RunConfig()
        if path is not None:
            parser = configparser.ConfigParser()
            read = parser.read(path)
            if not read:
                raise ConfigurationError(f"config file not found: {path}")
            for section in parser.sections():
                if section not in _SCHEMA:
                    raise ConfigurationError(f"unknown config section [{section}]")
                for key, value in parser.items(section):
                    if key not in _SCHEMA[section]:
                        raise ConfigurationError(
                            f"unknown config key {section}.{key}"
                        )
                    cfg.values[(section, key)] = value
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigurationError(
                    f"override must look like section.key=value, got {item!r}"
                )
            dotted, value = item.split("=", 1)
            section, key = dotted.split(".", 1)
            if section not in _SCHEMA or key not in _SCHEMA[section]:
                raise ConfigurationError(f"unknown config key {section}.{key}")
            cfg.values[(section, key)] = value
        return cfg

    def get(self, section, key, default=None, cast=str):
        raw = self.values.get((section, key))
        if raw is None:
            return default
        if cast is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigurationError(f"{section}.{key}: not a boolean: {raw!r}")
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{section}.{key}: {exc}") from exc

    def require(self, section, key, cast=str):
        value = self.get(section, key, cast=cast)
        if value is None:
            raise ConfigurationError(f"missing required config key {section}.{key}")
        return value

    def shape(self, section, key, default=None):
        raw = self.values.get((section, key))
        if raw is None:
            return default
        parts = raw.lower().replace("x", ",").split(",")
        if len(parts) != 3:
            raise ConfigurationError(f"{section}.{key}: expected CxHxW, got {raw!r}")
        return tuple(int(p) for p in parts)

    def render(self) -> str:
        sections: dict[str, list[str]] = {}
        for (section, key), value in sorted(self.values.items()):
            sections.setdefault(section, []).append(f"{key} = {value}")
        out = []
        for section in sorted(sections):
            out.append(f"[{section}]")
            out.extend(sections[section])
            out.append("")
        return "\n".join(out)

    # -- typed sub-configs -------------------------------------------------

    @property
    def seed(self) -> int:
        return self.get("run", "seed", 0, int)

    @property
    def output_dir(self) -> str:
        return self.get("run", "output_dir", "out")

    def flow_config(self) -> FlowConfig:
        return FlowConfig(
            levels=self.get("flow", "levels", 2, int),
            steps_per_level=self.get("flow", "steps_per_level", 4, int),
            hidden_width=self.get("flow", "hidden_width", 64, int),
            input_shape=self.shape("flow", "input_shape", (3, 8, 8)),
            dequantization_noise=self.get(
                "flow", "dequantization_noise", True, bool
            ),
            logit_input=self.get("flow", "logit_input", True, bool),
            logit_margin=self.get("flow", "logit_margin", 0.05, float),
        )

    def threat(self) -> ThreatModel:
        return ThreatModel(
            norm=self.get("attack", "norm", "inf"),
            image_eps=self.get("attack", "image_eps", 0.0, float),
            image_step=self.get("attack", "image_step", 0.0, float),
            latent_eta=self.get("attack", "latent_eta", 0.0, float),
            latent_step=self.get("attack", "latent_step", 0.0, float),
            iterations=self.get("attack", "iterations", 10, int),
            random_start=self.get("attack", "random_start", False, bool),
        )

    def train_config(self) -> TrainConfig:
        drop_raw = self.get("training", "drop_epochs", "")
        drops = tuple(int(p) for p in drop_raw.split(",") if p.strip())
        probe = None
        probe_eps = self.get("training", "probe_eps", None, float)
        if probe_eps is not None:
            probe = ThreatModel(
                image_eps=probe_eps, image_step=probe_eps / 4,
                iterations=self.get("training", "probe_iterations", 10, int),
            )
        return TrainConfig(
            epochs=self.get("training", "epochs", 10, int),
            batch_size=self.get("training", "batch_size", 64, int),
            lr=self.get("training", "lr", 0.1, float),
            momentum=self.get("training", "momentum", 0.9, float),
            weight_decay=self.get("training", "weight_decay", 2e-4, float),
            drop_epochs=drops,
            drop_factor=self.get("training", "drop_factor", 0.1, float),
            threat=self.threat(),
            tau=self.get("training", "tau", 0.1, float),
            mode=self.get("training", "mode", "normal"),
            attack_kind=self.get("training", "attack_kind", "pgd"),
            seed=self.seed,
            eval_samples=self.get("training", "eval_samples", 256, int),
            probe_threat=probe,
        )

    def synth_spec(self) -> SyntheticManifoldSpec:
        return SyntheticManifoldSpec(
            generator_kind=self.get("data", "generator_kind", "flow"),
            input_shape=self.shape("data", "input_shape", (3, 8, 8)),
            n_classes=self.get("data", "n_classes", 2, int),
            n_samples=self.get("data", "n_samples", 1000, int),
            seed=self.seed,
            latent_margin=self.get("data", "latent_margin", 0.0, float),
            flow_levels=self.get("data", "flow_levels", 2, int),
            flow_steps=self.get("data", "flow_steps", 2, int),
            flow_width=self.get("data", "flow_width", 32, int),
            generator_scale=self.get("data", "generator_scale", 0.1, float),
        )


def _prepare_outdir(cfg: RunConfig) -> str:
    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "resolved-config.ini"), "w") as f:
        f.write(cfg.render())
    return outdir


def _load_dataset(cfg: RunConfig) -> TensorDataset:
    return load_tensor_dataset(cfg.require("data", "dataset"))


def _load_flow(cfg: RunConfig):
    path = cfg.get("flow", "checkpoint")
    if path is None:
        return None
    model = load_checkpoint(path)
    if isinstance(model, ClassifierModel):
        raise ConfigurationError(f"{path} is a classifier checkpoint, not a flow")
    return model


# -- subcommands -----------------------------------------------------------


def cmd_synth_data(cfg: RunConfig) -> int:
    outdir = _prepare_outdir(cfg)
    spec = cfg.synth_spec()
    dataset, generator = synth_manifold_dataset(spec)
    data_path = os.path.join(outdir, "dataset.bin")
    gen_path = os.path.join(outdir, "generator.ckpt")
    save_tensor_dataset(dataset, data_path)
    save_checkpoint(generator, gen_path, seed=spec.seed,
                    extra_meta={"synth_spec": spec.to_dict()})
    print(f"wrote {data_path} ({len(dataset)} samples) and {gen_path}")
    return 0


def cmd_train_flow(cfg: RunConfig) -> int:
    outdir = _prepare_outdir(cfg)
    dataset = _load_dataset(cfg)
    config = replace(cfg.flow_config(), input_shape=dataset.input_shape)
    flow = FlowModel(config, init_seed=seed_for(cfg.seed, "flow-init")).double()
    trace = fit_mle(
        flow, dataset.images_t(),
        epochs=cfg.get("flow", "epochs", 10, int),
        batch_size=cfg.get("flow", "batch_size", 64, int),
        lr=cfg.get("flow", "lr", 1e-3, float),
        seed=cfg.seed,
    )
    ckpt = os.path.join(outdir, "flow.ckpt")
    save_checkpoint(flow, ckpt, seed=cfg.seed)
    trace_path = os.path.join(outdir, "nll-trace.csv")
    with open(trace_path, "w") as f:
        f.write("epoch,nll\n")
        for i, nll in enumerate(trace, start=1):
            f.write(f"{i},{nll!r}\n")
    print(f"wrote {ckpt} and {trace_path} (final NLL {trace[-1]:.4f})")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    outdir = _prepare_outdir(cfg)
    dataset = _load_dataset(cfg)
    train_cfg = cfg.train_config()
    flow = _load_flow(cfg)
    if train_cfg.mode in ("om_at", "ijsat") and flow is None:
        raise ConfigurationError(
            f"mode {train_cfg.mode!r} requires flow.checkpoint"
        )
    clf_cfg = ClassifierConfig(
        arch=cfg.get("classifier", "arch", "cnn"),
        input_shape=dataset.input_shape,
        num_classes=max(dataset.num_classes,
                        cfg.get("classifier", "num_classes", 2, int)),
        width=cfg.get("classifier", "width", 32, int),
    )
    model = ClassifierModel(
        clf_cfg, init_seed=seed_for(cfg.seed, "classifier-init")
    ).double()
    state = train_classifier(model, dataset, train_cfg, flow=flow)
    ckpt = os.path.join(outdir, "classifier.ckpt")
    save_checkpoint(model, ckpt, seed=cfg.seed,
                    extra_meta={"train_config": train_cfg.to_dict()})
    curve_path = os.path.join(outdir, "curves.csv")
    track_training_curves(state, curve_path)
    last = state.metrics[-1]
    print(
        f"wrote {ckpt} and {curve_path} "
        f"(std_acc {last.std_acc:.3f}, robust_acc {last.robust_acc:.3f})"
    )
    return 0


def cmd_attack(cfg: RunConfig) -> int:
    outdir = _prepare_outdir(cfg)
    dataset = _load_dataset(cfg)
    model = load_checkpoint(cfg.require("classifier", "checkpoint"),
                            expect="classifier")
    flow = _load_flow(cfg)
    threat = cfg.threat()
    kind = cfg.get("attack", "kind", "pgd")
    max_samples = cfg.get("evaluation", "max_samples", None, int)
    n = len(dataset) if max_samples is None else min(max_samples, len(dataset))
    dtype = next(model.parameters()).dtype
    x = dataset.images_t(dtype)[:n]
    y = dataset.labels_t()[:n]
    adv = run_attack(kind, model, flow, x, y, threat, seed=cfg.seed)
    # Defense in depth: re-verify budgets and range before writing. A
    # violation here is an internal error, never a user error.
    tol = 1e-6
    eff_norm = "2" if kind == "l2_pgd" else threat.norm
    delta_norm = (
        adv.delta.reshape(n, -1).abs().max(dim=1).values.max()
        if eff_norm == "inf"
        else adv.delta.reshape(n, -1).norm(dim=1).max()
    )
    if float(delta_norm) > threat.image_eps + tol:
        raise AdvlabError("internal: image-space budget violated on output")
    if adv.lam is not None and float(adv.lam.abs().max()) > threat.latent_eta + tol:
        raise AdvlabError("internal: latent-space budget violated on output")
    if float(adv.x_adv.min()) < 0.0 or float(adv.x_adv.max()) > 1.0:
        raise AdvlabError("internal: adversarial pixels out of range")
    out_path = os.path.join(outdir, "adversarial.bin")
    arrays = {
        "x_adv": adv.x_adv.numpy(), "delta": adv.delta.numpy(),
        "loss_trace": adv.loss_trace.numpy(),
        "success": adv.success.numpy(),
    }
    if adv.lam is not None:
        arrays["lam"] = adv.lam.numpy()
    success_rate = float(adv.success.double().mean())
    write_container(
        out_path, "adversarial",
        {
            "attack_kind": kind, "threat": threat.to_dict(), "seed": cfg.seed,
            "n_samples": n, "success_rate": success_rate,
        },
        arrays,
    )
    print(f"wrote {out_path} (success rate {success_rate:.3f})")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    from advlab.figures import plot_report

    outdir = _prepare_outdir(cfg)
    dataset = _load_dataset(cfg)
    ckpt_path = cfg.require("classifier", "checkpoint")
    model = load_checkpoint(ckpt_path, expect="classifier")
    flow = _load_flow(cfg)
    suite = default_suite(
        eps=cfg.get("evaluation", "suite_eps", 8 / 255, float),
        eta=cfg.get("evaluation", "suite_eta", 0.02, float),
    )
    if flow is None:
        suite = [row for row in suite if row[1] in ("pgd", "l2_pgd", "fgsm")]
    report = evaluate_robustness(
        model, flow, dataset, suite, seed=cfg.seed,
        max_samples=cfg.get("evaluation", "max_samples", None, int),
        checkpoint_id=os.path.basename(ckpt_path),
    )
    report_path = os.path.join(outdir, "report.json")
    report.save(report_path)
    fig_path = plot_report(report, os.path.join(outdir, "report.png"))
    print(report.format_table())
    print(f"wrote {report_path} and {fig_path}")
    return 0


def cmd_curves(cfg: RunConfig, curve_args: list[str]) -> int:
    from advlab.figures import plot_training_curves

    outdir = _prepare_outdir(cfg)
    if not curve_args:
        raise ConfigurationError("curves needs label=path arguments")
    files = {}
    for item in curve_args:
        if "=" in item:
            label, path = item.split("=", 1)
        else:
            label, path = os.path.basename(item), item
        files[label] = path
    out = plot_training_curves(
        files, os.path.join(outdir, "curves.png")
    )
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advlab",
        description="Joint-space adversarial attacks and interpolated "
                    "adversarial training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train-flow", "train", "attack", "evaluate", "synth-data"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", default=[], metavar="S.K=V",
                       help="override a config value")
    p = sub.add_parser("curves")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="S.K=V")
    p.add_argument("curve_files", nargs="*", metavar="LABEL=PATH")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.set)
        torch.set_num_threads(max(1, torch.get_num_threads()))
        if args.command == "synth-data":
            return cmd_synth_data(cfg)
        if args.command == "train-flow":
            return cmd_train_flow(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "attack":
            return cmd_attack(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "curves":
            return cmd_curves(cfg, args.curve_files)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except AdvlabError as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
