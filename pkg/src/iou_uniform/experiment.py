"""End-to-end simulated experiments: data, training, ablation ladder, figure tables.

Every random draw comes from a generator keyed by ``(seed, stream, index)``
(see ``_seeding``), so the outputs depend only on the configuration and not on
``jobs`` or evaluation order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _seeding as S
from .boxgeom import apply_deltas_array, encode_deltas_array, iou_aligned
from .config import ExperimentConfig
from .evaluate import (
    AP_THRESHOLDS,
    RECALL_IOUS,
    ap_range,
    correlation_report,
    csv_table,
    iou_histogram,
    localization_improvement,
    recall_curve,
)
from .infer import (
    ONE_PASS,
    RANK_CLS,
    RANK_FUSED,
    TWO_PASS,
    build_detections,
    nms_detections,
    run_heads,
)
from .loss import loss_composition
from .rpn_sim import (
    RPN_BIN_EDGES,
    Scene,
    cls_scores,
    simulate_rpn_proposals,
    simulate_scene,
)
from .sampler import SampleBatch, generate_uniform_samples
from .toyhead import (
    HeadModel,
    TrainHyper,
    featurize_array,
    gather_gts,
    match_gts,
    train_iou_predictor,
    train_regressor,
)

log = logging.getLogger(__name__)

LADDER = ("baseline", "uniform", "efo", "weights")
LADDER_LABELS = {
    "baseline": "baseline (RPN samples, cls-score NMS)",
    "uniform": "+uniform IoU samples",
    "efo": "+EFO with IoU predictor",
    "weights": "+interval loss weights",
}
# regressor, IoU head, IoU mode, NMS ranking
LADDER_SPEC = {
    "baseline": ("reg_rpn", None, TWO_PASS, RANK_CLS),
    "uniform": ("reg_uniform", None, TWO_PASS, RANK_CLS),
    "efo": ("reg_uniform", "iou_uniform", TWO_PASS, RANK_FUSED),
    "weights": ("reg_weighted", "iou_uniform", TWO_PASS, RANK_FUSED),
}
NMS_MODES = {
    "cls": (ONE_PASS, RANK_CLS),
    "fused_one_pass": (ONE_PASS, RANK_FUSED),
    "fused_two_pass": (TWO_PASS, RANK_FUSED),
}
MODEL_NAMES = ("reg_rpn", "reg_uniform", "reg_weighted", "iou_rpn", "iou_uniform")
HIGH_IOU = 3  # index of the [0.8, 1.0) interval with default boundaries


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# ---------------------------------------------------------------------------
# data


@dataclass
class World:
    train_scenes: list[Scene]
    test_scenes: list[Scene]
    uniform: SampleBatch
    rpn_positives: SampleBatch
    heldout: SampleBatch
    test_proposals: list[SampleBatch]
    test_cls: list[np.ndarray]
    shortfalls: int = 0


def _make_scene(args):
    cfg, stream, i = args
    scene, _ = simulate_scene(cfg.scenes.params, S.derive_rng(cfg.seed, stream, i), scene_id=i)
    return scene


def uniform_for_scene(args):
    cfg, scene, stream = args
    if scene.n_gts == 0:
        return SampleBatch.empty(), 0
    sc = cfg.sampler
    res = generate_uniform_samples(
        scene.boxes, sc.intervals, sc.jitter, S.derive_rng(cfg.seed, stream, scene.scene_id),
        sc.max_attempts or None,
    )
    s = res.samples
    s.scene_index[:] = scene.scene_id
    return s, len(res.shortfalls)


def rpn_for_scene(args):
    cfg, rpn_cfg, scene, stream = args
    props = simulate_rpn_proposals(scene, rpn_cfg, S.derive_rng(cfg.seed, stream, scene.scene_id),
                                   cfg.sampler.intervals.boundaries)
    return props


def make_scenes(cfg: ExperimentConfig, n: int, stream: int, jobs: int = 1) -> list[Scene]:
    return _map(_make_scene, [(cfg, stream, i) for i in range(n)], jobs)


def build_world(cfg: ExperimentConfig, jobs: int = 1) -> World:
    train = make_scenes(cfg, cfg.scenes.train, S.SCENES_TRAIN, jobs)
    test = make_scenes(cfg, cfg.scenes.test, S.SCENES_TEST, jobs)
    uni = _map(uniform_for_scene, [(cfg, s, S.UNIFORM) for s in train], jobs)
    held = _map(uniform_for_scene, [(cfg, s, S.HELDOUT) for s in test], jobs)
    rpn_train = _map(rpn_for_scene, [(cfg, cfg.rpn, s, S.RPN_TRAIN) for s in train], jobs)
    rpn_test = _map(rpn_for_scene, [(cfg, cfg.rpn_test, s, S.RPN_TEST) for s in test], jobs)
    test_props, test_cls = [], []
    for s, p in zip(test, rpn_test):
        allp = p.all()
        test_props.append(allp)
        rng = S.derive_rng(cfg.seed, S.RPN_TEST, 10_000 + s.scene_id)
        test_cls.append(cls_scores(allp.iou, cfg.rpn_test, rng))
    return World(
        train, test,
        SampleBatch.concat([u for u, _ in uni]),
        SampleBatch.concat([p.positives for p in rpn_train]),
        SampleBatch.concat([h for h, _ in held]),
        test_props, test_cls,
        shortfalls=sum(n for _, n in uni),
    )


# ---------------------------------------------------------------------------
# training


def _hyper(h: TrainHyper, cfg: ExperimentConfig, offset: int, **kw) -> TrainHyper:
    return replace(h, seed=cfg.seed * 1000 + offset, sigma_feat=cfg.sigma_feat, **kw)


def _train_one(args):
    name, cfg, world = args
    ivals = cfg.sampler.intervals
    t = cfg.training
    if name == "reg_rpn":
        return train_regressor(world.rpn_positives, world.train_scenes, ivals,
                               _hyper(t.regressor, cfg, 1, weighted=False))
    if name == "reg_uniform":
        return train_regressor(world.uniform, world.train_scenes, ivals,
                               _hyper(t.regressor, cfg, 2, weighted=False))
    if name == "reg_weighted":
        return train_regressor(world.uniform, world.train_scenes, ivals,
                               _hyper(t.regressor, cfg, 2, weighted=True))
    if name == "iou_rpn":
        return train_iou_predictor(world.rpn_positives, world.train_scenes, _hyper(t.iou, cfg, 3))
    if name == "iou_uniform":
        return train_iou_predictor(world.uniform, world.train_scenes, _hyper(t.iou, cfg, 4))
    raise KeyError(name)


def train_models(cfg: ExperimentConfig, world: World, names=MODEL_NAMES, jobs: int = 1):
    results = _map(_train_one, [(n, cfg, world) for n in names], jobs)
    return {n: r for n, r in zip(names, results)}


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SceneRun:
    dets: dict[str, list]  # per IoU mode
    true_iou: np.ndarray  # refined box vs best GT
    one_pass: np.ndarray
    two_pass: np.ndarray


def run_scenes(cfg: ExperimentConfig, world: World, regressor: HeadModel | None,
               iou_model: HeadModel | None, ranking: str) -> list[SceneRun]:
    runs = []
    for scene, props, cls in zip(world.test_scenes, world.test_proposals, world.test_cls):
        rng = S.derive_rng(cfg.seed, S.INFER, scene.scene_id)
        out = run_heads(props.boxes, scene, regressor, iou_model, cfg.sigma_feat, rng)
        _, true = match_gts(out.refined, scene.boxes)
        dets = {m: build_detections(out, cls, scene, m, ranking) for m in (ONE_PASS, TWO_PASS)}
        runs.append(SceneRun(dets, true, out.iou_one_pass, out.iou_two_pass))
    return runs


def _nms_all(runs: list[SceneRun], mode: str, thr: float, ranking: str = RANK_FUSED) -> list:
    kept = []
    for r in runs:
        kept.extend(nms_detections(r.dets[mode], thr, ranking))
    return kept


def heldout_refinement(cfg: ExperimentConfig, world: World, regressor: HeadModel):
    """Pre/post/gt boxes for the held-out uniform set refined by ``regressor``."""
    held = world.heldout
    gt_boxes, app = gather_gts(held, world.test_scenes)
    rng = S.derive_rng(cfg.seed, S.HELDOUT, 99_999)
    feats = featurize_array(held.boxes, gt_boxes, app, cfg.sigma_feat, rng)
    post = apply_deltas_array(held.boxes, regressor.predict(feats))
    return held.boxes, post, gt_boxes


def heldout_iou_mae(cfg: ExperimentConfig, world: World, model: HeadModel,
                    lo: float = 0.8, hi: float = 1.0) -> float:
    held = world.heldout
    gt_boxes, app = gather_gts(held, world.test_scenes)
    rng = S.derive_rng(cfg.seed, S.HELDOUT, 99_998)
    feats = featurize_array(held.boxes, gt_boxes, app, cfg.sigma_feat, rng)
    pred = model.predict(feats)
    sel = (held.iou >= lo) & (held.iou <= hi)
    return float(np.mean(np.abs(pred[sel] - held.iou[sel])))


@dataclass
class ExperimentResult:
    seed: int
    ladder: dict[str, float] = field(default_factory=dict)
    ap_tables: dict[str, dict[float, float]] = field(default_factory=dict)
    fig3: dict[str, dict[int, float | None]] = field(default_factory=dict)
    high_iou_post: dict[str, float] = field(default_factory=dict)
    iou_mae_high: dict[str, float] = field(default_factory=dict)
    corr: dict[str, tuple[float, float]] = field(default_factory=dict)
    recall: dict[str, list[float]] = field(default_factory=dict)
    tables: dict[str, str] = field(default_factory=dict)
    models: dict[str, HeadModel] = field(default_factory=dict)
    # detections surviving NMS, per ladder row
    kept: dict[str, list] = field(default_factory=dict)


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with stage context
        raise StageError(name, exc) from exc


def run_experiment(cfg: ExperimentConfig, rows=LADDER, jobs: int = 1,
                   models: dict[str, HeadModel] | None = None) -> ExperimentResult:
    """Build data, train every head, run the ablation ladder and the figure analyses."""
    for r in rows:
        if r not in LADDER_SPEC:
            raise ValueError(f"unknown ladder row {r!r}")
    res = ExperimentResult(cfg.seed)
    world = _stage("simulate", build_world, cfg, jobs)
    if models is None:
        trained = _stage("train", train_models, cfg, world, MODEL_NAMES, jobs)
        models = {k: v.model for k, v in trained.items()}
        res.tables["training_trace.csv"] = csv_table(
            ["model", "epoch", "loss"],
            [(k, i, float(x)) for k, v in trained.items() for i, x in enumerate(v.trace)],
        )
    res.models = models
    _stage("figures", _figure_tables, cfg, world, models, res)
    _stage("ladder", _ladder, cfg, world, models, rows, res)
    _stage("nms-compare", _nms_compare, cfg, world, models, res)
    return res


def run_nms_compare(cfg: ExperimentConfig, models: dict[str, HeadModel] | None = None,
                    jobs: int = 1) -> ExperimentResult:
    """Recall curves for the three NMS ranking modes plus the IoU correlation tables."""
    res = ExperimentResult(cfg.seed)
    world = _stage("simulate", build_world, cfg, jobs)
    if models is None:
        names = ("reg_weighted", "iou_uniform")
        trained = _stage("train", train_models, cfg, world, names, jobs)
        models = {k: v.model for k, v in trained.items()}
    res.models = models
    _stage("nms-compare", _nms_compare, cfg, world, models, res)
    return res


def _ladder(cfg, world, models, rows, res):
    thr = cfg.inference.nms_threshold
    for row in rows:
        reg, iou_name, mode, ranking = LADDER_SPEC[row]
        runs = run_scenes(cfg, world, models[reg], models.get(iou_name) if iou_name else None,
                          ranking)
        kept = _nms_all(runs, mode, thr, ranking)
        ap = ap_range(kept, world.test_scenes)
        res.kept[row] = kept
        res.ladder[row] = ap.mean_ap
        res.ap_tables[row] = ap.per_threshold
    res.tables["table4_ablation.csv"] = csv_table(
        ["row", "method", "mean_ap"] + [f"ap{int(round(t * 100))}" for t in AP_THRESHOLDS],
        [(r, LADDER_LABELS[r], res.ladder[r], *[res.ap_tables[r][t] for t in AP_THRESHOLDS])
         for r in rows],
    )


def _nms_compare(cfg, world, models, res):
    runs = run_scenes(cfg, world, models["reg_weighted"], models["iou_uniform"], RANK_FUSED)
    thr = cfg.inference.nms_threshold
    for name, (mode, ranking) in NMS_MODES.items():
        kept = _nms_all(runs, mode, thr, ranking)
        res.recall[name] = recall_curve(kept, world.test_scenes)
        res.tables[f"fig7_recall_{name}.csv"] = csv_table(
            ["matching_iou", "recall"], list(zip(RECALL_IOUS, res.recall[name]))
        )
    true = np.concatenate([r.true_iou for r in runs])
    for mode, attr in ((ONE_PASS, "one_pass"), (TWO_PASS, "two_pass")):
        pred = np.concatenate([getattr(r, attr) for r in runs])
        rep = correlation_report(pred, true)
        res.corr[mode] = (rep.pearson_r, rep.mae)
        res.tables[f"fig8_scatter_{mode}.csv"] = rep.to_csv()
    res.tables["fig8_summary.csv"] = csv_table(
        ["mode", "pearson_r", "mae"], [(m, *res.corr[m]) for m in (ONE_PASS, TWO_PASS)]
    )


def _figure_tables(cfg, world, models, res):
    ivals = cfg.sampler.intervals
    b = ivals.boundaries
    # IoU histogram of RPN-style positives per 0.1 bin
    hist = iou_histogram(world.rpn_positives.iou, RPN_BIN_EDGES)
    res.tables["fig1a_rpn_histogram.csv"] = csv_table(
        ["bin_lo", "bin_hi", "count"],
        [(RPN_BIN_EDGES[k], RPN_BIN_EDGES[k + 1], int(c)) for k, c in enumerate(hist)],
    )
    # loss composition of an untrained (zero-output) head
    comp_rows = []
    for name, batch in (("rpn", world.rpn_positives), ("uniform", world.uniform)):
        gt_boxes, _ = gather_gts(batch, world.train_scenes)
        targets = encode_deltas_array(batch.boxes, gt_boxes) / np.asarray(
            cfg.training.regressor.delta_stds)
        for wname, w in (("unweighted", [1.0] * ivals.n_intervals), ("weighted", ivals.weights)):
            shares = loss_composition(None, targets, batch.interval, w)
            comp_rows += [(name, wname, j, s) for j, s in enumerate(shares)]
    res.tables["fig1c_loss_composition.csv"] = csv_table(
        ["samples", "weights", "interval", "share"], comp_rows)

    # held-out refinement per regressor: per-interval gain and refined-IoU histogram
    fig3_rows, fig6_rows = [], []
    edges = (0.0,) + tuple(RPN_BIN_EDGES)
    for name in ("reg_rpn", "reg_uniform", "reg_weighted"):
        pre, post, gt = heldout_refinement(cfg, world, models[name])
        gain = localization_improvement(pre, post, gt, b)
        res.fig3[name] = gain
        before = iou_aligned(pre, gt)
        after = iou_aligned(post, gt)
        high = (before >= b[HIGH_IOU]) & (before <= 1.0)
        res.high_iou_post[name] = float(np.mean(after[high]))
        fig3_rows += [(name, b[j], b[j + 1], g) for j, g in gain.items()]
        h = iou_histogram(after, edges)
        fig6_rows += [(name, edges[k], edges[k + 1], int(c)) for k, c in enumerate(h)]
    res.tables["fig3_localization_improvement.csv"] = csv_table(
        ["regressor", "iou_lo", "iou_hi", "mean_delta_iou"], fig3_rows)
    res.tables["fig6_refined_histogram.csv"] = csv_table(
        ["regressor", "bin_lo", "bin_hi", "count"], fig6_rows)

    for name in ("iou_rpn", "iou_uniform"):
        res.iou_mae_high[name] = heldout_iou_mae(cfg, world, models[name])
    res.tables["table6_iou_predictor_mae.csv"] = csv_table(
        ["predictor", "mae_iou_0.8_1.0"], [(n, res.iou_mae_high[n]) for n in res.iou_mae_high])
