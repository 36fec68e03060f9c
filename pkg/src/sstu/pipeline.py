"""End-to-end frame processing over file-based stereo streams.

Stands in for the live camera/HMD rig: stereo pairs are read from disk
as ``<n>_L.png`` / ``<n>_R.png``, segmented, composited against a virtual
layer and written back out together with a per-frame timing CSV.  A
discrete-event simulator models the capture-rate vs. inference-rate
frame dropping behaviour.
"""

from __future__ import annotations

import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import compositing, datasets, imaging, metrics, model

TIMING_CSV_HEADER = "frame,arrival_ms,prep_ms,inference_ms,composite_ms,total_ms,delay_ms,dropped"


@dataclass
class FrameRecord:
    index: int
    arrival_ms: float
    processed: bool = True
    prep_ms: float = 0.0
    inference_ms: float = 0.0
    composite_ms: float = 0.0

    @property
    def total_ms(self):
        return self.prep_ms + self.inference_ms + self.composite_ms

    def delay_ms(self, capture_latency_ms):
        return capture_latency_ms + self.total_ms


@dataclass
class PipelineConfig:
    model_path: str
    input_dir: str
    output_dir: str
    camera_config: str | None = None
    virtual_dir: str | None = None
    threshold: float = 0.5
    capture_latency_ms: float = 37.0
    fps: float = 60.0
    parallel_eyes: bool = True
    video_depth_m: float = 1.0
    virtual_depth_m: float = 2.0

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")


def records_to_csv(records, capture_latency_ms):
    lines = [TIMING_CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.index},{r.arrival_ms:.3f},{r.prep_ms:.3f},{r.inference_ms:.3f},"
            f"{r.composite_ms:.3f},{r.total_ms:.3f},"
            f"{r.delay_ms(capture_latency_ms):.3f},{0 if r.processed else 1}")
    return "\n".join(lines) + "\n"


def _find_stereo_pairs(input_dir):
    """Sorted (index, left path, right path | None) triples."""
    sides: dict[int, dict[str, str]] = {}
    for name in os.listdir(input_dir):
        m = re.match(r"(\d+)_([LR])\.png$", name)
        if m:
            sides.setdefault(int(m.group(1)), {})[m.group(2)] = os.path.join(input_dir, name)
    return [(i, d.get("L"), d.get("R")) for i, d in sorted(sides.items())]


def _gradient_scene(h, w, depth_m):
    """Procedural virtual layer so compositing is always exercised."""
    ys = np.linspace(0.1, 0.7, h, dtype=np.float32)
    xs = np.linspace(0.0, 0.5, w, dtype=np.float32)
    rgb = np.stack([
        np.tile(xs, (h, 1)),
        np.tile(ys[:, None], (1, w)),
        np.full((h, w), 0.45, dtype=np.float32),
    ])
    return rgb, np.full((h, w), depth_m, dtype=np.float32)


def _process_eye(bundle, frame, threshold, cfg, virtual, overlap=None):
    """Segment one eye and composite it; returns (mask, composite, timings)."""
    t0 = time.perf_counter()
    size = bundle.arch.input_size
    small = imaging.resize_bilinear(frame, size, size).astype(np.float32)
    t1 = time.perf_counter()
    prob = model.infer(bundle, small)
    t2 = time.perf_counter()
    # upscale the probabilities (not a hard mask): soft alpha keeps the
    # composite from flickering at the silhouette
    prob_full = imaging.resize_bilinear(prob[None].astype(np.float32),
                                        frame.shape[1], frame.shape[2])[0]
    video_depth = np.full(prob_full.shape, cfg.video_depth_m, dtype=np.float32)
    if overlap is not None:
        # video is only rendered inside the zed/eye frustum overlap
        keep = np.zeros(prob_full.shape, dtype=bool)
        y0, y1 = int(np.floor(overlap[1])), int(np.ceil(overlap[3]))
        x0, x1 = int(np.floor(overlap[0])), int(np.ceil(overlap[2]))
        keep[max(0, y0):y1, max(0, x0):x1] = True
        video_depth[~keep] = np.inf
    virtual_rgb, virtual_depth = virtual
    inputs = compositing.CompositeInputs(
        video=frame, prob=prob_full,
        video_depth=video_depth,
        virtual_rgb=virtual_rgb, virtual_depth=virtual_depth)
    comp = compositing.alpha_composite(inputs)
    t3 = time.perf_counter()
    timings = ((t1 - t0) * 1000.0, (t2 - t1) * 1000.0, (t3 - t2) * 1000.0)
    return prob_full, comp, timings


def _eye_overlaps(cfg, h, w):
    """Frustum overlap rects per eye, scaled to the frame size."""
    if not cfg.camera_config:
        return {"L": None, "R": None}
    rig = compositing.load_camera_config(cfg.camera_config)
    out = {}
    for eye, zed_view, eye_view in (("L", rig.zed_left, rig.eye_left),
                                    ("R", rig.zed_right, rig.eye_right)):
        r = compositing.frustum_overlap(zed_view.intrinsics, zed_view.pose,
                                        eye_view.intrinsics, eye_view.pose)
        sx = w / eye_view.intrinsics.width
        sy = h / eye_view.intrinsics.height
        out[eye] = (r.x0 * sx, r.y0 * sy, r.x1 * sx, r.y1 * sy)
    return out


def _load_virtual(cfg, index, h, w):
    if cfg.virtual_dir:
        path = os.path.join(cfg.virtual_dir, f"{index}_V.png")
        if os.path.exists(path):
            rgb = datasets.load_image(path)
            if rgb.shape[1:] != (h, w):
                rgb = imaging.resize_bilinear(rgb, h, w)
            return rgb, np.full((h, w), cfg.virtual_depth_m, dtype=np.float32)
    return _gradient_scene(h, w, cfg.virtual_depth_m)


def run_segmentation(cfg: PipelineConfig, log=None):
    """Frame loop of the segmentation+compositing pipeline.

    Returns (records, stereo consistency per processed frame).  Output
    masks, composites and the timing CSV land in cfg.output_dir.
    """
    bundle = model.load_weights(cfg.model_path)
    pairs = _find_stereo_pairs(cfg.input_dir)
    if not pairs:
        raise ValueError(f"{cfg.input_dir}: no <n>_L.png / <n>_R.png frames found")
    os.makedirs(cfg.output_dir, exist_ok=True)
    interval = 1000.0 / cfg.fps

    records = []
    consistencies = []
    overlap_cache: dict[tuple, dict] = {}
    for seq, (index, left, right) in enumerate(pairs):
        rec = FrameRecord(index=index, arrival_ms=seq * interval)
        if left is None or right is None:
            missing = "L" if left is None else "R"
            if log is not None:
                log(f"warning: frame {index} missing {missing} eye, skipped")
            rec.processed = False
            records.append(rec)
            continue
        frames = [datasets.load_image(left), datasets.load_image(right)]
        h, w = frames[0].shape[1:]
        virtual = _load_virtual(cfg, index, h, w)
        if (h, w) not in overlap_cache:
            overlap_cache[(h, w)] = _eye_overlaps(cfg, h, w)
        overlaps = overlap_cache[(h, w)]

        jobs = list(zip(frames, (overlaps["L"], overlaps["R"])))
        if cfg.parallel_eyes:
            with ThreadPoolExecutor(max_workers=2) as pool:
                results = list(pool.map(
                    lambda job: _process_eye(bundle, job[0], cfg.threshold, cfg,
                                             virtual, job[1]), jobs))
        else:
            results = [_process_eye(bundle, f, cfg.threshold, cfg, virtual, ov)
                       for f, ov in jobs]

        masks = []
        for eye, (prob_full, comp, timings) in zip("LR", results):
            datasets.save_mask(os.path.join(cfg.output_dir, f"{index}_{eye}_mask.png"),
                               metrics.binarize(prob_full, cfg.threshold))
            np.save(os.path.join(cfg.output_dir, f"{index}_{eye}_prob.npy"),
                    prob_full.astype(np.float32))
            datasets.save_image(os.path.join(cfg.output_dir, f"{index}_{eye}_comp.png"),
                                comp.clip(0.0, 1.0))
            masks.append(metrics.binarize(prob_full, cfg.threshold))
            rec.prep_ms += timings[0]
            rec.inference_ms += timings[1]
            rec.composite_ms += timings[2]
        consistencies.append(metrics.stereo_consistency(masks[0], masks[1]))
        records.append(rec)

    with open(os.path.join(cfg.output_dir, "timing.csv"), "w") as f:
        f.write(records_to_csv(records, cfg.capture_latency_ms))
    return records, consistencies


# ------------------------------------------------------------ stream model

@dataclass
class StreamStats:
    total: int
    processed: int
    dropped: int
    processed_indices: list[int] = field(default_factory=list)

    @property
    def ratio(self):
        return self.processed / self.total if self.total else 0.0


def simulate_stream(fps, inference_ms, duration_s=1.0) -> StreamStats:
    """Discrete-event model of the capture/inference rate mismatch.

    Frames arrive every 1000/fps ms.  A single worker picks up the newest
    frame at its arrival instant when idle; every frame that arrives
    while it is busy is dropped in favour of the next newer one.  With a
    constant service time this processes every ceil(service/interval)-th
    frame.
    """
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    if inference_ms < 0:
        raise ValueError(f"inference_ms must be non-negative, got {inference_ms}")
    interval = 1000.0 / fps
    total = int(round(fps * duration_s))
    busy_until = -math.inf
    processed = []
    for i in range(total):
        t = i * interval
        if t >= busy_until:
            processed.append(i)
            busy_until = t + inference_ms
    return StreamStats(total=total, processed=len(processed),
                       dropped=total - len(processed), processed_indices=processed)


# ------------------------------------------------------------ timing report

@dataclass
class StageStats:
    mean: float
    min: float
    max: float


@dataclass
class TimingSummary:
    frames: int
    prep: StageStats
    inference: StageStats
    composite: StageStats
    mean_total_ms: float
    implied_rate_hz: float
    mean_delay_ms: float

    def format_text(self):
        lines = [f"frames processed: {self.frames}"]
        for name, s in (("prep", self.prep), ("inference", self.inference),
                        ("composite", self.composite)):
            lines.append(f"{name:>10}: mean {s.mean:.2f} ms  min {s.min:.2f}  max {s.max:.2f}")
        lines.append(f"mean total: {self.mean_total_ms:.2f} ms")
        lines.append(f"implied max rate: {self.implied_rate_hz:.1f} Hz")
        lines.append(f"mean delivery delay: {self.mean_delay_ms:.2f} ms")
        return "\n".join(lines)


def timing_report(records, capture_latency_ms=37.0) -> TimingSummary:
    done = [r for r in records if r.processed]
    if not done:
        raise ValueError("timing_report: no processed frames")

    def stage(values):
        return StageStats(float(np.mean(values)), float(np.min(values)),
                          float(np.max(values)))

    totals = [r.total_ms for r in done]
    mean_total = float(np.mean(totals))
    return TimingSummary(
        frames=len(done),
        prep=stage([r.prep_ms for r in done]),
        inference=stage([r.inference_ms for r in done]),
        composite=stage([r.composite_ms for r in done]),
        mean_total_ms=mean_total,
        implied_rate_hz=1000.0 / mean_total if mean_total > 0 else math.inf,
        mean_delay_ms=capture_latency_ms + mean_total,
    )
