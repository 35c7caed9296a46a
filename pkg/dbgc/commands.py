"""Pipeline stages over one output directory.

Each public command takes the manifest lock, runs its stage(s) and records the written
artifacts with their checksums. Stage seeds are derived from the root seed so reruns
with the same configuration reproduce every artifact byte for byte.
"""

import csv
import io
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from aws_lambda_powertools import Logger

from common.errors import ArtifactMissingError, ShapeMismatchError
from dbgc.artifact_store import ArtifactStore
from dbgc.checkpoint import decode_checkpoint, encode_checkpoint, load_module_state, prefixed_state
from dbgc.config import CnnConfig, PipelineConfig
from dbgc.fusion_head import JointTrainer, build_head, predict_map
from dbgc.graphmae import GraphMAEPretrainer, PixelFeatureMap, encode_graph
from dbgc.metrics_report import Metrics, class_palette, evaluate, format_table, metrics_report, render_map
from dbgc.pixel_cnn import build_pixel_cnn
from dbgc.polsar_data import (
    FeatureImage,
    GroundTruth,
    LabelSplit,
    NormStats,
    extract_features,
    load_coherency,
    load_ground_truth,
    make_split,
    normalize_features,
    pauli_rgb,
    synth_scene,
)
from dbgc.superpixel import (
    SuperpixelSegmentation,
    boundary_overlay,
    load_segmentation,
    save_segmentation,
    slic_segment,
)
from dbgc.supergraph import build_graph, export_graph_json, load_graph_json

logger = Logger(service="dbgc", child=True)

STAGES = ("scene", "split", "segment", "pretrain", "train")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}

FEATURES_KEY = "features.npy"
FEATURES_META_KEY = "features.json"
GROUND_TRUTH_KEY = "ground_truth.npy"
PAULI_KEY = "pauli_rgb.png"
SPLIT_KEY = "split.json"
SEGMENTATION_KEYS = ("segmentation.bin", "segmentation.json")
BOUNDARIES_KEY = "boundaries.png"
GRAPH_KEY = "graph.json"
GRAPHMAE_KEY = "graphmae.ckpt"
PRETRAIN_LOSS_KEY = "pretrain_loss.csv"
EMBEDDINGS_KEY = "node_embeddings.npy"
CLASSIFIER_KEY = "classifier.ckpt"
TRAIN_LOSS_KEY = "train_loss.csv"
PREDICTION_KEY = "prediction.bin"
MAP_KEY = "classification_map.png"
METRICS_KEY = "metrics.json"
METRICS_TEXT_KEY = "metrics.txt"
COMPARISON_KEY = "comparison.json"
COMPARISON_TEXT_KEY = "comparison.txt"

# (column label, alpha or None for the configured value, key prefix)
ABLATION_RUNS = (("GNN", 1.0, "ablation_gnn/"), ("CNN", 0.0, "ablation_cnn/"), ("DB-GC", None, ""))


def stage_seeds(root_seed: int) -> Dict[str, int]:
    children = np.random.SeedSequence(root_seed).spawn(len(STAGES))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(STAGES, children)}


def _record(store: ArtifactStore, config: PipelineConfig, stage: str, keys: Sequence[str]) -> None:
    store.update_manifest(
        stage,
        keys,
        root_seed=config.seed,
        stage_seeds=stage_seeds(config.seed),
        config=config.model_dump(mode="json"),
    )


def _loss_csv(history: Sequence[float]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["epoch", "loss"])
    for epoch, value in enumerate(history):
        writer.writerow([epoch, repr(float(value))])
    return buffer.getvalue()


def read_loss_csv(store: ArtifactStore, key: str) -> List[float]:
    rows = csv.DictReader(io.StringIO(store.try_get_object(key).decode("utf-8")))
    return [float(row["loss"]) for row in rows]


# ------------------ artifact readers ------------------


def load_features(store: ArtifactStore) -> FeatureImage:
    meta = store.try_get_json(FEATURES_META_KEY)
    return FeatureImage(
        store.load_array(FEATURES_KEY),
        normalized=True,
        norm_stats=NormStats.from_dict(meta["norm_stats"]),
    )


def load_stored_ground_truth(store: ArtifactStore) -> GroundTruth:
    meta = store.try_get_json(FEATURES_META_KEY)
    return GroundTruth(labels=store.load_array(GROUND_TRUTH_KEY), class_names=tuple(meta["class_names"]))


def load_split(store: ArtifactStore) -> LabelSplit:
    return LabelSplit.from_dict(store.try_get_json(SPLIT_KEY))


def load_stored_segmentation(store: ArtifactStore) -> SuperpixelSegmentation:
    for key in SEGMENTATION_KEYS:
        if not store.exists(key):
            raise ArtifactMissingError(f"{key} missing in {store.root}; run the segment stage first")
    return load_segmentation(store.root)


def load_fs_map(store: ArtifactStore) -> PixelFeatureMap:
    seg = load_stored_segmentation(store)
    return PixelFeatureMap(node_embeddings=store.load_array(EMBEDDINGS_KEY), labels=seg.labels)


# ------------------ stages ------------------


def prepare_stage(config: PipelineConfig, store: ArtifactStore) -> List[str]:
    seeds = stage_seeds(config.seed)
    source = config.data
    if source.kind == "synthetic":
        coh, gt = synth_scene(source.scene, seeds["scene"])
    else:
        coh = load_coherency(source.directory)
        gt = load_ground_truth(source.directory)
    if (gt.height, gt.width) != (coh.height, coh.width):
        raise ShapeMismatchError("Ground truth and coherency image differ in size")

    features = normalize_features(extract_features(coh))
    split_seed = config.split.seed if config.split.seed is not None else seeds["split"]
    split = make_split(gt, config.split.per_class, split_seed)

    store.save_array(FEATURES_KEY, features.data)
    store.try_save_object(
        FEATURES_META_KEY,
        {
            "height": features.height,
            "width": features.width,
            "normalized": True,
            "norm_stats": features.norm_stats.to_dict(),
            "class_names": list(gt.class_names),
        },
    )
    store.save_array(GROUND_TRUTH_KEY, gt.labels.astype(np.uint8))
    store.save_png(PAULI_KEY, pauli_rgb(coh))
    store.try_save_object(SPLIT_KEY, split.to_dict())
    return [FEATURES_KEY, FEATURES_META_KEY, GROUND_TRUTH_KEY, PAULI_KEY, SPLIT_KEY]


def segment_stage(config: PipelineConfig, store: ArtifactStore) -> List[str]:
    seeds = stage_seeds(config.seed)
    rgb = store.load_png(PAULI_KEY)
    features = load_features(store)
    cfg = config.superpixel
    k_target = cfg.resolve_k_target(features.height, features.width)
    seg = slic_segment(rgb, k_target, cfg.compactness, cfg.iterations, seed=seeds["segment"])
    save_segmentation(seg, store.root)
    store.save_png(BOUNDARIES_KEY, boundary_overlay(rgb, seg))
    export_graph_json(build_graph(features, seg), store.path(GRAPH_KEY))
    return [*SEGMENTATION_KEYS, BOUNDARIES_KEY, GRAPH_KEY]


def pretrain_stage(config: PipelineConfig, store: ArtifactStore, run_logger=None) -> List[str]:
    seeds = stage_seeds(config.seed)
    seg = load_stored_segmentation(store)
    graph = load_graph_json(store.path(GRAPH_KEY), seg)
    cfg = config.graphmae.model_copy(update={"seed": seeds["pretrain"]})
    model, history = GraphMAEPretrainer(cfg, logger=run_logger)(graph)

    store.save_bytes(
        GRAPHMAE_KEY,
        encode_checkpoint(model.state_dict(), {"model": "graphmae", "config": cfg.model_dump(mode="json")}),
    )
    store.save_text(PRETRAIN_LOSS_KEY, _loss_csv(history))
    store.save_array(EMBEDDINGS_KEY, encode_graph(graph, model))
    return [GRAPHMAE_KEY, PRETRAIN_LOSS_KEY, EMBEDDINGS_KEY]


def _classifier_manifest(cnn_cfg: CnnConfig, alpha: float, embedding_dim: int, n_classes: int) -> dict:
    return {
        "model": "classifier",
        "alpha": alpha,
        "embedding_dim": embedding_dim,
        "n_classes": n_classes,
        "cnn": cnn_cfg.model_dump(mode="json"),
    }


def train_stage(
    config: PipelineConfig,
    store: ArtifactStore,
    alpha: Optional[float] = None,
    prefix: str = "",
    run_logger=None,
) -> List[str]:
    seeds = stage_seeds(config.seed)
    alpha = config.fusion.alpha if alpha is None else alpha
    features = load_features(store)
    gt = load_stored_ground_truth(store)
    split = load_split(store)
    fs_map = load_fs_map(store)

    dtype = _DTYPES[config.cnn.dtype]
    cnn = build_pixel_cnn(config.cnn, fs_map.d, seed=seeds["train"])
    head = build_head(fs_map.d, gt.n_classes, seed=seeds["train"], dtype=dtype)
    fusion_cfg = config.fusion.model_copy(update={"alpha": alpha, "seed": seeds["train"]})
    cnn, head, history = JointTrainer(fusion_cfg, logger=run_logger)(fs_map, features, split, cnn, head)

    manifest = _classifier_manifest(config.cnn, alpha, fs_map.d, gt.n_classes)
    store.save_bytes(prefix + CLASSIFIER_KEY, encode_checkpoint(prefixed_state(cnn=cnn, head=head), manifest))
    store.save_text(prefix + TRAIN_LOSS_KEY, _loss_csv(history))
    return [prefix + CLASSIFIER_KEY, prefix + TRAIN_LOSS_KEY]


def load_classifier(store: ArtifactStore, prefix: str = ""):
    state, manifest = decode_checkpoint(store.try_get_object(prefix + CLASSIFIER_KEY))
    cnn_cfg = CnnConfig.model_validate(manifest["cnn"])
    cnn = build_pixel_cnn(cnn_cfg, manifest["embedding_dim"], seed=0)
    head = build_head(manifest["embedding_dim"], manifest["n_classes"], seed=0, dtype=_DTYPES[cnn_cfg.dtype])
    load_module_state(cnn, state, prefix="cnn")
    load_module_state(head, state, prefix="head")
    return cnn, head, float(manifest["alpha"])


def evaluate_stage(config: PipelineConfig, store: ArtifactStore, prefix: str = "", label: str = "DB-GC") -> Tuple[List[str], Metrics]:
    features = load_features(store)
    gt = load_stored_ground_truth(store)
    split = load_split(store)
    fs_map = load_fs_map(store)
    # alpha comes from the checkpoint so evaluation matches training
    cnn, head, alpha = load_classifier(store, prefix)

    result = predict_map(fs_map, features, cnn, head, alpha, batch_size=config.fusion.predict_batch_size)
    metrics = evaluate(result.class_map, gt, exclude=split.train_coords)

    store.save_bytes(prefix + PREDICTION_KEY, result.class_map.astype(np.uint8).tobytes())
    store.save_png(prefix + MAP_KEY, render_map(result.class_map, class_palette(gt.n_classes)))
    store.try_save_object(prefix + METRICS_KEY, {"alpha": alpha, **metrics_report(metrics)})
    store.save_text(prefix + METRICS_TEXT_KEY, format_table({label: metrics}))
    logger.info("Evaluation finished", extra={"run": label, "alpha": alpha, "oa": metrics.oa, "aa": metrics.aa})
    return [prefix + PREDICTION_KEY, prefix + MAP_KEY, prefix + METRICS_KEY, prefix + METRICS_TEXT_KEY], metrics


# ------------------ commands ------------------


def _store_for(config: PipelineConfig, store: Optional[ArtifactStore], run_logger) -> ArtifactStore:
    return store if store is not None else ArtifactStore(config.output_dir, logger=run_logger)


def cmd_prepare(config: PipelineConfig, store: Optional[ArtifactStore] = None, run_logger=None) -> List[str]:
    store = _store_for(config, store, run_logger)
    with store.lock():
        keys = prepare_stage(config, store)
        _record(store, config, "prepare", keys)
    return keys


def cmd_segment(config: PipelineConfig, store: Optional[ArtifactStore] = None, run_logger=None) -> List[str]:
    store = _store_for(config, store, run_logger)
    with store.lock():
        keys = segment_stage(config, store)
        _record(store, config, "segment", keys)
    return keys


def cmd_pretrain(config: PipelineConfig, store: Optional[ArtifactStore] = None, run_logger=None) -> List[str]:
    store = _store_for(config, store, run_logger)
    with store.lock():
        keys = pretrain_stage(config, store, run_logger)
        _record(store, config, "pretrain", keys)
    return keys


def cmd_train(config: PipelineConfig, store: Optional[ArtifactStore] = None, run_logger=None) -> List[str]:
    store = _store_for(config, store, run_logger)
    with store.lock():
        keys = train_stage(config, store, run_logger=run_logger)
        _record(store, config, "train", keys)
    return keys


def cmd_evaluate(config: PipelineConfig, store: Optional[ArtifactStore] = None, run_logger=None) -> Metrics:
    store = _store_for(config, store, run_logger)
    with store.lock():
        keys, metrics = evaluate_stage(config, store)
        _record(store, config, "evaluate", keys)
    return metrics


def _shared_stages(config: PipelineConfig, store: ArtifactStore, run_logger) -> None:
    for stage, run in (
        ("prepare", lambda: prepare_stage(config, store)),
        ("segment", lambda: segment_stage(config, store)),
        ("pretrain", lambda: pretrain_stage(config, store, run_logger)),
    ):
        _record(store, config, stage, run())


def run_all(config: PipelineConfig, store: Optional[ArtifactStore] = None, run_logger=None) -> Metrics:
    store = _store_for(config, store, run_logger)
    with store.lock():
        _shared_stages(config, store, run_logger)
        _record(store, config, "train", train_stage(config, store, run_logger=run_logger))
        keys, metrics = evaluate_stage(config, store)
        _record(store, config, "evaluate", keys)
    return metrics


def compare(config: PipelineConfig, store: Optional[ArtifactStore] = None, run_logger=None) -> Dict[str, Metrics]:
    """GNN-only, CNN-only and fused runs on one split, segmentation and F_s."""
    store = _store_for(config, store, run_logger)
    runs: Dict[str, Metrics] = {}
    with store.lock():
        _shared_stages(config, store, run_logger)
        for label, alpha, prefix in ABLATION_RUNS:
            keys = train_stage(config, store, alpha=alpha, prefix=prefix, run_logger=run_logger)
            eval_keys, metrics = evaluate_stage(config, store, prefix=prefix, label=label)
            _record(store, config, "compare", [*keys, *eval_keys])
            runs[label] = metrics
        store.try_save_object(COMPARISON_KEY, {label: metrics_report(m) for label, m in runs.items()})
        store.save_text(COMPARISON_TEXT_KEY, format_table(runs))
        _record(store, config, "compare", [COMPARISON_KEY, COMPARISON_TEXT_KEY])
    return runs
