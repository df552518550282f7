"""Command-line entry point.

    fsdet fixture    --config run.yaml        generate the synthetic dataset
    fsdet prepare    --config run.yaml        splits + k-shot manifests
    fsdet train-base --config run.yaml        phase one (or a single-phase baseline)
    fsdet finetune   --config run.yaml        phase two (ours / frcn_ft)
    fsdet eval       --config run.yaml        AP of the mode's final checkpoint
    fsdet plot       --config run.yaml        grouped-bar charts from eval results

Every command takes ``--config`` plus repeatable ``--set key=value``
overrides, writes its artifacts under the configured output root, and
drops a run_record.json (resolved config, config hash, content hashes of
the inputs it read) next to them so a run can be reproduced exactly.

Exit codes: 0 success, 2 bad input or configuration, 3 insufficient
annotation capacity, 4 missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .config import RunConfig, load_config, parse_overrides
from .episodes import KShotSet, read_kshot_manifest, sample_kshot, write_kshot_manifest
from .errors import (
    CapacityError,
    ConfigError,
    FsdetError,
    MissingArtifactError,
    TrainingDiverged,
)
from .evaluate import BenchmarkGrid, EvalData, plot_results, run_benchmark
from .fixtures import FixtureSpec, generate_fixture
from .ingest import (
    ClassSplit,
    build_support_pool,
    load_dataset,
    make_split,
    partition_train_test,
    read_split_manifest,
    write_split_manifest,
)
from .model import FewShotDetector, ModelConfig
from .train import (
    TrainConfig,
    base_training_data,
    finetune_novel,
    joint_training_data,
    kshot_training_data,
    run_baseline,
    train_base,
)

logger = logging.getLogger(__name__)

TWO_PHASE_MODES = ("ours", "frcn_ft")


def _git_blob_hash(path: Path) -> str:
    """Content hash the way git hashes a blob."""
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def _write_run_record(out_dir: Path, command: str, cfg: RunConfig,
                      inputs: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    config_doc = json.dumps(cfg.to_dict(), sort_keys=True)
    record = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": hashlib.sha256(config_doc.encode()).hexdigest(),
        "input_hashes": {
            str(p): _git_blob_hash(p) for p in sorted(set(inputs)) if p.is_file()
        },
        "seed": cfg.seed,
    }
    with open(out_dir / "run_record.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------- #
# shared plumbing


def _prepare_dir(cfg: RunConfig) -> Path:
    return cfg.out_path / "prepare"


def _train_dir(cfg: RunConfig) -> Path:
    return cfg.out_path / f"train_{cfg.mode}"


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(feature_channels=cfg.feature_channels,
                       anchor_scales=cfg.anchor_scale_tuple)


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise MissingArtifactError(f"missing {hint}: {path} (run the producing command first)")
    return path


class Prepared:
    """Dataset + manifests reloaded for a follow-up command."""

    def __init__(self, cfg: RunConfig):
        root = cfg.require_dataset()
        self.vocabulary, images = load_dataset(root)
        split_path = _require(_prepare_dir(cfg) / "split.json", "split manifest")
        doc = read_split_manifest(split_path)
        by_id = {im.image_id: im for im in images}
        try:
            self.train_images = [by_id[i] for i in doc["train_image_ids"]]
            self.test_images = [by_id[i] for i in doc["test_image_ids"]]
        except KeyError as exc:
            raise ConfigError(f"split manifest references unknown image {exc}")
        self.split = ClassSplit(
            base_classes=frozenset(self.vocabulary.id_of(n) for n in doc["base_classes"]),
            novel_classes=frozenset(self.vocabulary.id_of(n) for n in doc["novel_classes"]),
            seed=int(doc["seed"]),
        )
        self.inputs = [split_path]
        self._cfg = cfg
        self._train_by_id = {im.image_id: im for im in self.train_images}

    def kshot(self) -> KShotSet:
        path = _require(
            _prepare_dir(self._cfg) / f"kshot_k{self._cfg.k}.json", "k-shot manifest"
        )
        self.inputs.append(path)
        return read_kshot_manifest(path, self._train_by_id, self.vocabulary)

    def eval_data(self) -> EvalData:
        """Test images scored against supports cut from the k-shot boxes."""
        kshot = self.kshot()
        kept = {im.image_id: kshot.kept_indices(im.image_id) for im in kshot.images}
        pool = build_support_pool(kshot.images, kept=kept)
        return EvalData(
            images=self.test_images,
            support_pool=pool,
            task_classes=sorted(self.vocabulary.ids),
            novel_classes=self.split.novel_classes,
        )

    @property
    def split_id(self) -> int:
        # one split per novel class; its id is the novel class id
        return min(self.split.novel_classes)


def _final_checkpoint(cfg: RunConfig) -> Path:
    names = {
        "ours": "finetuned.npz",
        "frcn_ft": "frcn_ft_finetuned.npz",
        "frcn_few": "frcn_few.npz",
        "frcn_joint": "frcn_joint.npz",
    }
    return _train_dir(cfg) / names[cfg.mode]


# --------------------------------------------------------------------- #
# commands


def cmd_fixture(cfg: RunConfig, config_path: Path) -> int:
    if not cfg.dataset_root:
        raise ConfigError("config key 'dataset_root' must name where the fixture goes")
    spec = FixtureSpec(
        n_classes=cfg.fixture_classes,
        n_images=cfg.fixture_images,
        image_size=cfg.fixture_size,
        seed=cfg.seed,
    )
    root = generate_fixture(spec, cfg.dataset_root)
    _write_run_record(root, "fixture", cfg, [config_path])
    print(f"fixture dataset written to {root}")
    return 0


def cmd_prepare(cfg: RunConfig, config_path: Path) -> int:
    root = cfg.require_dataset()
    vocabulary, images = load_dataset(root)
    if not cfg.novel_class:
        raise ConfigError("config key 'novel_class' is required for prepare")
    novel_id = vocabulary.id_of(cfg.novel_class)
    split = make_split(vocabulary.ids, novel_id, seed=cfg.seed)
    train, test = partition_train_test(images, cfg.train_ratio, cfg.seed)
    pool = build_support_pool(train)

    prep = _prepare_dir(cfg)
    prep.mkdir(parents=True, exist_ok=True)
    write_split_manifest(prep / "split.json", vocabulary, split, train, test, pool)
    kshot = sample_kshot(train, sorted(vocabulary.ids), cfg.k, cfg.seed)
    write_kshot_manifest(prep / f"kshot_k{cfg.k}.json", kshot, vocabulary)

    manifest = root / "manifest.json"
    _write_run_record(prep, "prepare", cfg,
                      [config_path] + ([manifest] if manifest.is_file() else []))
    print(f"split + k-shot manifests written to {prep}")
    return 0


def cmd_train_base(cfg: RunConfig, config_path: Path) -> int:
    prepared = Prepared(cfg)
    out_dir = _train_dir(cfg)
    model_cfg = _model_config(cfg)
    n_classes = len(prepared.vocabulary.ids)

    if cfg.mode in TWO_PHASE_MODES:
        data = base_training_data(prepared.train_images, prepared.split)
        tc = TrainConfig(
            phase="base", mode=cfg.mode, learning_rate=cfg.lr_base,
            iterations=cfg.iterations_base, batch_episodes=cfg.batch_episodes,
            seed=cfg.seed, sample_batch=cfg.sample_batch,
        )
        if cfg.mode == "ours":
            model = FewShotDetector(model_cfg, init_seed=cfg.seed)
            result = train_base(model, data, tc, out_dir)
        else:
            plain = replace(model_cfg, use_highlight=False, num_classes=n_classes)
            model = FewShotDetector(plain, init_seed=cfg.seed)
            result = train_base(model, data, tc, out_dir,
                                checkpoint_name="frcn_ft_base.npz")
    else:
        tc = TrainConfig(
            phase="base", mode=cfg.mode, k=cfg.k, learning_rate=cfg.lr_base,
            iterations=cfg.iterations_base, batch_episodes=cfg.batch_episodes,
            seed=cfg.seed, sample_batch=cfg.sample_batch,
        )
        if cfg.mode == "frcn_few":
            data = kshot_training_data(prepared.kshot())
        else:
            data = joint_training_data(
                prepared.train_images, prepared.split, cfg.k, cfg.seed
            )
        result = run_baseline(cfg.mode, data, tc, out_dir, num_classes=n_classes,
                              model_config=model_cfg, init_seed=cfg.seed)[0]

    _write_run_record(out_dir, "train-base", cfg, [config_path] + prepared.inputs)
    print(f"checkpoint written to {result.checkpoint}")
    return 0


def cmd_finetune(cfg: RunConfig, config_path: Path) -> int:
    if cfg.mode not in TWO_PHASE_MODES:
        raise ConfigError(f"mode {cfg.mode!r} is single-phase; nothing to fine-tune")
    prepared = Prepared(cfg)
    out_dir = _train_dir(cfg)
    base_name = "base.npz" if cfg.mode == "ours" else "frcn_ft_base.npz"
    base_ckpt = _require(out_dir / base_name, "base checkpoint")
    model = FewShotDetector.load(base_ckpt, init_seed=cfg.seed)

    kshot = prepared.kshot()
    tc = TrainConfig(
        phase="finetune", mode=cfg.mode, k=cfg.k, learning_rate=cfg.lr_finetune,
        iterations=cfg.iterations_finetune, batch_episodes=cfg.batch_episodes,
        seed=cfg.seed, sample_batch=cfg.sample_batch,
    )
    final_name = "finetuned.npz" if cfg.mode == "ours" else "frcn_ft_finetuned.npz"
    result = finetune_novel(model, kshot, tc, out_dir, checkpoint_name=final_name)

    _write_run_record(out_dir, "finetune", cfg,
                      [config_path, base_ckpt] + prepared.inputs)
    print(f"checkpoint written to {result.checkpoint}")
    return 0


def cmd_eval(cfg: RunConfig, config_path: Path) -> int:
    prepared = Prepared(cfg)
    ckpt = _require(_final_checkpoint(cfg), "trained checkpoint")
    data = prepared.eval_data()
    out_dir = cfg.out_path / f"eval_{cfg.mode}_k{cfg.k}"

    grid = run_benchmark(
        model_factory=lambda mode, split_id, k: FewShotDetector.load(ckpt),
        splits=[prepared.split_id],
        ks=[cfg.k],
        modes=[cfg.mode],
        data_for_split=lambda split_id: data,
        out_dir=out_dir,
        seed=cfg.seed,
    )
    _write_run_record(out_dir, "eval", cfg, [config_path, ckpt] + prepared.inputs)
    result = grid.results[0] if grid.results else None
    if result is not None:
        print(f"results written to {out_dir}; novel AP = {result.novel_ap}")
    return 0


def cmd_plot(cfg: RunConfig, config_path: Path) -> int:
    from .evaluate import EvalResult

    grid = BenchmarkGrid()
    summaries = sorted(cfg.out_path.glob("eval_*/summary.json"))
    for path in summaries:
        with open(path) as fh:
            doc = json.load(fh)
        for mode, per_split in doc.get("novel_ap", {}).items():
            for split_id, per_k in per_split.items():
                for k, ap in per_k.items():
                    grid.results.append(EvalResult(
                        per_class_ap={}, novel_ap=ap,
                        split_id=int(split_id), k=int(k), mode=mode,
                    ))
    plot_dir = cfg.out_path / "plots"
    written = plot_results(grid, plot_dir)
    if not written:
        print("no evaluation results found; nothing plotted")
        return 0
    _write_run_record(plot_dir, "plot", cfg, [config_path] + summaries)
    print(f"{sum(1 for p in written if p.suffix == '.png')} chart(s) written to {plot_dir}")
    return 0


# --------------------------------------------------------------------- #


COMMANDS = {
    "fixture": cmd_fixture,
    "prepare": cmd_prepare,
    "train-base": cmd_train_base,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsdet",
        description="few-shot object detection: prepare, train, evaluate, plot",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip() or None)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, parse_overrides(args.set))
        return COMMANDS[args.command](cfg, Path(args.config))
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except TrainingDiverged as exc:
        print(f"error: {exc} (diagnostic checkpoint: {exc.checkpoint})", file=sys.stderr)
        return 1
    except FsdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
