"""Command-line entry point: ``generate``, ``curate``, ``train`` and ``eval``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .exceptions import ConfigurationError, InvalidParameterError, MultiLevelCLIPError

logger = logging.getLogger("multilevel_clip")

OUTPUT_ROOT_ENV = "MULTILEVEL_CLIP_OUTPUT_ROOT"
EVAL_TASKS = ("zeroshot", "probe", "predcls", "sgcls", "localize", "dump", "viz")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class EvaluationSettings:
    tasks: tuple = EVAL_TASKS
    split: str = "test"
    templates_file: str = ""
    predicate_vocab_size: int = 0  # 0 keeps every training predicate
    probe_epochs: int = 6
    probe_lr: float = 2e-5
    localize_epochs: int = 3
    localize_train_scenes: int = 0  # 0 uses the whole training split
    viz_scenes: int = 4


@dataclass
class RunConfig:
    """Parsed config file: one section per module plus ``seed`` and ``output_root``."""

    seed: int = 0
    output_root: Path = Path("runs")
    n_scenes: int = 2000
    scene: dict = field(default_factory=dict)
    curation: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    base_dir: Path = Path(".")  # relative paths in the file resolve against this

    @classmethod
    def from_toml(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = tomli.loads(path.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw, base_dir=Path(".")):
        raw = dict(raw)
        allowed = {"seed", "output_root", "scene", "curation", "encoder", "training", "evaluation"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        scene = dict(raw.get("scene", {}))
        n_scenes = scene.pop("n_scenes", 2000)
        ev_raw = dict(raw.get("evaluation", {}))
        ev_names = {f.name for f in fields(EvaluationSettings)}
        bad = sorted(set(ev_raw) - ev_names)
        if bad:
            raise ConfigurationError(f"unknown [evaluation] keys: {', '.join(bad)}")
        if "tasks" in ev_raw:
            ev_raw["tasks"] = parse_tasks(ev_raw["tasks"])
        root = Path(raw.get("output_root", "runs"))
        cfg = cls(seed=int(raw.get("seed", 0)), output_root=root if root.is_absolute()
                  else Path(base_dir) / root, n_scenes=n_scenes, scene=scene,
                  curation=dict(raw.get("curation", {})), encoder=dict(raw.get("encoder", {})),
                  training=dict(raw.get("training", {})),
                  evaluation=EvaluationSettings(**ev_raw), base_dir=Path(base_dir))
        env_root = os.environ.get(OUTPUT_ROOT_ENV)
        if env_root:
            cfg.output_root = Path(env_root)
        return cfg

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def dataset_dir(self):
        return self.output_root / "dataset"

    @property
    def checkpoint_path(self):
        return self.output_root / "checkpoints" / "model.pt"

    @property
    def reports_dir(self):
        return self.output_root / "reports"

    @property
    def plots_dir(self):
        return self.output_root / "plots"

    def scene_config(self):
        from .synth import SceneConfig
        try:
            return SceneConfig.from_dict({**self.scene, "seed": self.seed})
        except TypeError as exc:
            raise ConfigurationError(f"[scene]: {exc}") from exc

    def encoder_config(self, image_size):
        from .encoders import EncoderConfig
        try:
            return EncoderConfig(**{"image_size": image_size, **self.encoder})
        except TypeError as exc:
            raise ConfigurationError(f"[encoder]: {exc}") from exc

    def train_config(self, lambda_kd=None, epochs=None):
        from .training import TrainConfig
        data = {**self.training, "seed": self.seed}
        if lambda_kd is not None:
            data["lambda_kd"] = lambda_kd
        if epochs is not None:
            data["epochs"] = epochs
        try:
            return TrainConfig(**data)
        except TypeError as exc:
            raise ConfigurationError(f"[training]: {exc}") from exc


def parse_tasks(spec):
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    tasks = [t.strip() for t in items if t.strip()]
    bad = [t for t in tasks if t not in EVAL_TASKS]
    if bad or not tasks:
        raise UsageError(f"unknown task(s) {', '.join(bad) or '(none)'}; "
                         f"valid tasks: {', '.join(EVAL_TASKS)}")
    return tuple(tasks)


def _rel(path, root):
    try:
        return str(Path(path).relative_to(root))
    except ValueError:
        return str(path)


def _load_manifest(path):
    from .synth import DatasetManifest
    path = Path(path)
    if not (path / "manifest.json").is_file() and not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return DatasetManifest.load(path)


# ----------------------------------------------------------------- commands

def cmd_generate(cfg, args):
    from .synth import render_dataset
    out = Path(args.out) if args.out else cfg.dataset_dir
    n = args.scenes if args.scenes is not None else cfg.n_scenes
    if n < 1:
        raise UsageError(f"--scenes must be >= 1, got {n}")
    manifest = render_dataset(cfg.scene_config(), n, out)
    print(f"wrote {n} scenes; manifest {manifest.path} sha256 {manifest.checksum()}")
    return manifest


def cmd_curate(cfg, args):
    from .curation import ClusterConfig, curate, read_term_list
    from .curation.labels import DEFAULT_COLORS, DEFAULT_STOPWORDS
    manifest = _load_manifest(args.dataset or cfg.dataset_dir)
    anns = [manifest.load_annotation(sid) for sid in sorted(manifest.data["records"])]
    labels = sorted({o["name"] for a in anns for o in a["objects"]})
    triplets = [tuple(r["triplet"]) for a in anns for r in a["relations"]]
    cur = dict(cfg.curation)
    colors = (read_term_list(cfg.resolve(cur.pop("colors_file"))) if cur.get("colors_file")
              else DEFAULT_COLORS)
    stopwords = (read_term_list(cfg.resolve(cur.pop("stopwords_file")))
                 if cur.get("stopwords_file") else DEFAULT_STOPWORDS)
    cur.pop("colors_file", None)
    cur.pop("stopwords_file", None)
    try:
        cluster_cfg = ClusterConfig(**cur)
    except TypeError as exc:
        raise ConfigurationError(f"[curation]: {exc}") from exc
    state, relations = curate(labels, triplets, colors=colors, stopwords=stopwords,
                              cluster_config=cluster_cfg)
    out = Path(args.out) if args.out else cfg.output_root / "vocabulary.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    state.save(out, relations=sorted({" | ".join(t) for t in relations}),
               n_raw_relations=len(triplets))
    print(f"wrote vocabulary {out}: {len(state.group_names)} groups, "
          f"{len(state.noise_labels)} noise labels, {len(set(relations))} relations")
    return out


def cmd_train(cfg, args):
    from .training import LambdaSchedule, train
    schedule = "none" if args.no_kd else args.lambda_kd
    if schedule is not None:
        try:
            schedule = LambdaSchedule.parse(schedule)
        except InvalidParameterError as exc:
            raise UsageError(str(exc)) from exc
    manifest = _load_manifest(args.dataset or cfg.dataset_dir)
    train_cfg = cfg.train_config(schedule, args.epochs)
    out = Path(args.out) if args.out else cfg.checkpoint_path
    enc_cfg = cfg.encoder_config(manifest.config.image_size)
    result = train(train_cfg, manifest, out, encoder_config=enc_cfg)
    first, last = result.history[0]["L_total"], result.history[-1]["L_total"]
    print(f"wrote checkpoint {out} ({len(result.history)} steps, "
          f"loss {first:.4f} -> {last:.4f}, lambda_kd {train_cfg.lambda_kd.describe()})")
    return result


def _relation_classes(manifest):
    from .records import triplet_text
    return sorted({triplet_text(r["triplet"]) for sid in manifest.data["records"]
                   for r in manifest.load_annotation(sid)["relations"]})


def cmd_eval(cfg, args):
    from . import evaluation as ev
    from .encoders import load_checkpoint
    ec = cfg.evaluation
    tasks = parse_tasks(args.tasks) if args.tasks else ec.tasks
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_path
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    manifest = _load_manifest(args.dataset or cfg.dataset_dir)
    split = args.split or ec.split
    if split not in manifest.splits:
        raise UsageError(f"unknown split {split!r}; expected one of {sorted(manifest.splits)}")
    model, _ = load_checkpoint(ckpt)
    templates = (ev.PromptTemplateSet.from_file(cfg.resolve(ec.templates_file))
                 if ec.templates_file else ev.PromptTemplateSet())
    vocab = manifest.vocabulary()
    object_names = [c.name for c in vocab.object_classes]
    test = manifest.load_split(split)
    need_train = {"probe", "predcls", "sgcls", "localize"} & set(tasks)
    train = manifest.load_split("train") if need_train else []
    reports_dir, plots_dir = cfg.reports_dir, cfg.plots_dir
    reports, written = [], []

    def emit(report, name=None):
        report.config["checkpoint"] = ckpt.name
        report.config["split"] = split
        written.append(report.save(reports_dir, name))
        reports.append(report)

    if "zeroshot" in tasks:
        for level, classes in (("action", list(vocab.actions)), ("object", object_names),
                               ("relation", _relation_classes(manifest))):
            emit(ev.zero_shot_retrieval(model, test, classes, templates, level))
    if "probe" in tasks:
        for level in ("action", "object", "relation"):
            emit(ev.linear_probe(model, train, test, level, epochs=ec.probe_epochs,
                                 lr=ec.probe_lr, random_state=cfg.seed))
    if {"predcls", "sgcls"} & set(tasks):
        pvocab = ev.select_predicate_vocab(train or test, ec.predicate_vocab_size or None)
        if "predcls" in tasks:
            emit(ev.predicate_classification(model, test, pvocab, templates))
        if "sgcls" in tasks:
            emit(ev.scene_graph_classification(model, test, object_names, pvocab, templates))
    if "localize" in tasks:
        loc_train = train[: ec.localize_train_scenes] if ec.localize_train_scenes else train
        sigma = manifest.config.rbf_sigma
        for frozen in (True, False):
            lcfg = ev.LocalizationDecoderConfig(frozen_encoder=frozen, epochs=ec.localize_epochs,
                                                seed=cfg.seed)
            emit(ev.relation_localization(model, loc_train, test, lcfg, sigma))
    if "dump" in tasks:
        npy, tsv = ev.dump_embeddings(model, test, cfg.output_root / "embeddings" / "objects")
        n_obj = sum(r.n_objects for r in test)
        emit(ev.MetricsReport("dump", {}, n_obj,
                              {"matrix": _rel(npy, cfg.output_root),
                               "labels": _rel(tsv, cfg.output_root), "rows": 2 * n_obj}))
    if "viz" in tasks:
        images = []
        for rec in test[: ec.viz_scenes]:
            heat = ev.relevance_map(model, rec.image, "global")
            path = plots_dir / f"relevance_{rec.scene_id}.png"
            ev.save_overlay(path, ev.overlay_heatmap(rec.image, heat))
            images.append(_rel(path, cfg.output_root))
        ranked = [r for r in reports if any(k in r.metrics for k in ("top1", "R@1"))]
        if ranked:
            images.append(_rel(ev.plot_retrieval_curves(ranked, plots_dir / "retrieval_curves.png"),
                               cfg.output_root))
        emit(ev.MetricsReport("viz", {}, len(images), {"images": images}))
    for path, rep in zip(written, reports):
        shown = ", ".join(f"{k}={v:.4f}" for k, v in sorted(rep.metrics.items()))
        print(f"{_rel(path, cfg.output_root)}: {shown or '(no metrics)'}")
    return written


# ------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="multilevel-clip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    g = add("generate", "render a synthetic scene dataset")
    g.add_argument("--scenes", type=int, help="number of scenes (default: config)")
    g.add_argument("--out", help="dataset directory (default: <root>/dataset)")

    c = add("curate", "curate the object vocabulary and relations of a dataset")
    c.add_argument("--dataset", help="dataset directory (default: <root>/dataset)")
    c.add_argument("--out", help="vocabulary file (default: <root>/vocabulary.json)")

    t = add("train", "train the six-encoder model")
    t.add_argument("--dataset", help="dataset directory (default: <root>/dataset)")
    t.add_argument("--out", help="checkpoint path (default: <root>/checkpoints/model.pt)")
    t.add_argument("--epochs", type=int)
    kd = t.add_mutually_exclusive_group()
    kd.add_argument("--lambda-kd", help="fixed:V or anneal:S-E, e.g. fixed:1, anneal:10-0")
    kd.add_argument("--no-kd", action="store_true", help="train without distillation")

    e = add("eval", "evaluate a checkpoint")
    e.add_argument("--checkpoint", help="default: <root>/checkpoints/model.pt")
    e.add_argument("--dataset", help="dataset directory (default: <root>/dataset)")
    e.add_argument("--split", help="evaluation split (default: config, usually test)")
    e.add_argument("--tasks", help=f"comma-separated subset of {','.join(EVAL_TASKS)}")
    return parser


COMMANDS = {"generate": cmd_generate, "curate": cmd_curate, "train": cmd_train, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_toml(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigurationError, InvalidParameterError) as exc:
        print(f"multilevel-clip {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MultiLevelCLIPError, OSError, RuntimeError, ValueError) as exc:
        print(f"multilevel-clip {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
