"""
Board geometry and motion-prior tracking of incomplete circle-grid patterns.

Circles seen in three consecutive patterns of a track are extrapolated with a quadratic
Lagrange predictor into the next ellipse frame that holds no pattern; each prediction claims its
nearest ellipse center when it lies within ``d_thd`` pixels. Sweeps alternate forward and
backward until the track stops growing.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InsufficientDataError, InvalidArgumentError
from .logging import logger
from .models import BoardSpec, EllipseFrame, GridPattern, PatternTrack, TrackingStats

DEFAULT_D_THD = 3.0
DEFAULT_MAX_TRAVERSAL_OFFSET = 3
# None resolves to BoardSpec.default_min_points
DEFAULT_MIN_POINTS: Optional[int] = None


def board_object_points(spec: BoardSpec) -> np.ndarray:
    """Board-frame circle centers (N, 3); circle (r, c) has index r * cols + c"""
    return spec.object_points()


def lagrange_weights(times: Sequence[float], tau: float) -> np.ndarray:
    """Quadratic Lagrange basis weights of three sample times at tau"""
    t = np.asarray(times, dtype=float)
    if t.shape != (3,):
        raise InvalidArgumentError(f"expected three sample times, got {t.shape}")
    if len(np.unique(t)) != 3:
        raise InvalidArgumentError(f"sample times must be distinct, got {t.tolist()}")
    w = np.ones(3)
    for k in range(3):
        for m in range(3):
            if m != k:
                w[k] *= (tau - t[m]) / (t[k] - t[m])
    return w


def lagrange_predict(
    samples: Sequence[Tuple[float, Sequence[float]]], tau_query: float
) -> np.ndarray:
    """Quadratic interpolation (or extrapolation) of three timestamped points"""
    if len(samples) != 3:
        raise InvalidArgumentError(f"expected three samples, got {len(samples)}")
    weights = lagrange_weights([s[0] for s in samples], tau_query)
    points = np.array([np.asarray(s[1], dtype=float) for s in samples])
    return weights @ points


def associate_nearest(
    predictions: np.ndarray, centers: np.ndarray, d_thd: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy one-to-one nearest association.

    Every prediction takes its nearest center; a center claimed twice goes to the closer
    prediction, ties to the lower prediction row. A prediction that loses its center is dropped;
    it does not fall back to its next-nearest center. Returns the kept prediction rows, the
    matched center rows and their distances.
    """
    if len(predictions) == 0 or len(centers) == 0:
        empty = np.zeros(0, dtype=int)
        return empty, empty, np.zeros(0)
    dist = np.linalg.norm(predictions[:, None, :] - centers[None, :, :], axis=-1)
    nearest = dist.argmin(axis=1)
    best = dist[np.arange(len(predictions)), nearest]
    rows = np.arange(len(predictions))
    order = np.lexsort((rows, best))
    _, first = np.unique(nearest[order], return_index=True)
    winners = np.sort(order[first])
    winners = winners[best[winners] <= d_thd]
    return winners, nearest[winners], best[winners]


class _Timeline:
    """Merged ellipse-frame and pattern timestamps of one camera"""

    def __init__(self, track: PatternTrack, frames: Sequence[EllipseFrame]):
        times = sorted({f.timestamp for f in frames} | set(track.timestamps))
        self.times = times
        self.index: Dict[float, int] = {t: i for i, t in enumerate(times)}
        self.centers: List[Optional[np.ndarray]] = [None] * len(times)
        for frame in frames:
            self.centers[self.index[frame.timestamp]] = frame.centers

    def __len__(self) -> int:
        return len(self.times)


class IncompletePatternTracker:
    """Runs the forward/backward prediction sweeps on a private copy of a track"""

    def __init__(
        self,
        board: BoardSpec,
        d_thd: float = DEFAULT_D_THD,
        min_points: Optional[int] = DEFAULT_MIN_POINTS,
        max_traversal_offset: int = DEFAULT_MAX_TRAVERSAL_OFFSET,
    ):
        if not d_thd > 0:
            raise InvalidArgumentError(f"d_thd must be positive, got {d_thd}")
        if max_traversal_offset < 2:
            raise InvalidArgumentError(
                f"max traversal offset must be at least 2, got {max_traversal_offset}"
            )
        self.board = board
        self.d_thd = d_thd
        self.min_points = board.default_min_points if min_points is None else min_points
        if self.min_points < 1:
            raise InvalidArgumentError(f"min_points must be positive, got {self.min_points}")
        self.max_traversal_offset = max_traversal_offset
        self.object_points = board_object_points(board)

    def _predict_pattern(
        self, triple: Sequence[GridPattern], target_time: float, centers: np.ndarray
    ) -> Optional[GridPattern]:
        common = np.intersect1d(triple[0].circle_indices, triple[1].circle_indices)
        common = np.intersect1d(common, triple[2].circle_indices)
        if len(common) < self.min_points:
            return None
        weights = lagrange_weights([p.timestamp for p in triple], target_time)
        stacked = np.stack(
            [p.image_points[np.searchsorted(p.circle_indices, common)] for p in triple]
        )
        predictions = np.einsum("k,knd->nd", weights, stacked)
        rows, matched, _ = associate_nearest(predictions, centers, self.d_thd)
        if len(rows) < self.min_points:
            return None
        return GridPattern.from_board(
            target_time, common[rows], centers[matched], self.board, self.object_points
        )

    def _target_slot(
        self, track: PatternTrack, timeline: _Timeline, start: int, offset: int
    ) -> Optional[int]:
        """Timeline slot predicted from the triple at track positions start..start+2"""
        if offset > 0:
            anchor = timeline.index[track[start + 2].timestamp]
            slot = anchor + offset - 1
            neighbour = start + 3
            blocked = neighbour < len(track) and timeline.index[track[neighbour].timestamp] <= slot
        else:
            anchor = timeline.index[track[start].timestamp]
            slot = anchor + offset + 1
            neighbour = start - 1
            blocked = neighbour >= 0 and timeline.index[track[neighbour].timestamp] >= slot
        if blocked or not 0 <= slot < len(timeline):
            return None
        centers = timeline.centers[slot]
        if centers is None or len(centers) == 0:
            return None
        return slot

    def _sweep(self, track: PatternTrack, timeline: _Timeline, offset: int) -> int:
        added = 0
        if offset > 0:
            start = 0
            while start + 2 < len(track):
                slot = self._target_slot(track, timeline, start, offset)
                if slot is not None:
                    pattern = self._predict_pattern(
                        track.patterns[start : start + 3],
                        timeline.times[slot],
                        timeline.centers[slot],  # type: ignore[arg-type]
                    )
                    if pattern is not None:
                        track.insert(pattern)
                        added += 1
                start += 1
        else:
            start = len(track) - 3
            while start >= 0:
                slot = self._target_slot(track, timeline, start, offset)
                pattern = None
                if slot is not None:
                    pattern = self._predict_pattern(
                        track.patterns[start : start + 3],
                        timeline.times[slot],
                        timeline.centers[slot],  # type: ignore[arg-type]
                    )
                if pattern is not None:
                    # new pattern sits at `start`; the next triple starts there
                    track.insert(pattern)
                    added += 1
                else:
                    start -= 1
        return added

    def track(
        self, complete_patterns: PatternTrack, frames: Sequence[EllipseFrame]
    ) -> PatternTrack:
        track = complete_patterns.copy()
        if len(track) < 3 or not frames:
            return track
        timeline = _Timeline(track, frames)

        offset = 2
        sweeps = 0
        while True:
            forward = self._sweep(track, timeline, offset)
            backward = self._sweep(track, timeline, -offset)
            sweeps += 1
            logger.log_debug(
                f"Tracking sweep {sweeps} at offset {offset}",
                {"forward": forward, "backward": backward, "patterns": len(track)},
            )
            if forward or backward:
                offset = 2
            elif offset < self.max_traversal_offset:
                offset += 1
            else:
                break
        return track


def track_incomplete(
    complete_patterns: PatternTrack,
    ellipse_frames: Sequence[EllipseFrame],
    board: BoardSpec,
    d_thd: float = DEFAULT_D_THD,
    min_points: Optional[int] = DEFAULT_MIN_POINTS,
    max_traversal_offset: int = DEFAULT_MAX_TRAVERSAL_OFFSET,
) -> PatternTrack:
    """Merged time-ordered track of the input patterns and the incomplete ones recovered"""
    tracker = IncompletePatternTracker(board, d_thd, min_points, max_traversal_offset)
    return tracker.track(complete_patterns, ellipse_frames)


def select_reference(track_a: PatternTrack, track_b: PatternTrack) -> str:
    """Camera id of the track with strictly more patterns; ties go to track_a"""
    for track in (track_a, track_b):
        if len(track) == 0:
            raise InsufficientDataError(f"camera '{track.camera_id}' has no tracked patterns")
    return track_b.camera_id if len(track_b) > len(track_a) else track_a.camera_id


def tracking_stats(
    track: PatternTrack, ellipse_frames: Sequence[EllipseFrame]
) -> TrackingStats:
    """Complete/incomplete counts over every frame or pattern timestamp of the camera"""
    slots = {f.timestamp for f in ellipse_frames} | set(track.timestamps)
    return TrackingStats(
        camera_id=track.camera_id,
        frame_count=len(slots),
        complete=track.complete_count,
        incomplete=track.incomplete_count,
    )
