"""Steering-driven critical-region planning mapped to a normalized image ROI.

The critical width grows linearly with steering magnitude and speed. Three
regimes split on |theta|: straight (<= 30 deg), moderate (30-60], and sharp
(> 60), where the region additionally shifts laterally toward the turn.
Two width laws ship: the verbatim linear form, and a deadband variant that
ignores steering inside the straight band so the width is continuous and
reverts to the base width when driving straight.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import DomainError


@dataclass(frozen=True)
class DroiConfig:
    w0: float = 3.0            # base width, meters
    k1: float = 0.05           # meters per steering degree
    k2: float = 0.1            # meters per (m/s)
    k3: float = 0.05           # lateral shift gain past the sharp threshold
    theta_straight: float = 30.0
    theta_moderate: float = 60.0
    deadband: bool = True
    w_max: float = 12.0        # width mapped to the full image
    lane_center: float = 0.5   # normalized image x of the ego path

    def __post_init__(self):
        if self.w0 <= 0:
            raise DomainError("droi", f"base width must be positive, got {self.w0}")
        if min(self.k1, self.k2, self.k3) < 0:
            raise DomainError("droi", "gains must be non-negative")
        if not 0 < self.theta_straight < self.theta_moderate:
            raise DomainError("droi", f"need 0 < straight ({self.theta_straight}) "
                                      f"< moderate ({self.theta_moderate})")
        if self.w_max < self.w0:
            raise DomainError("droi", f"w_max {self.w_max} < base width {self.w0}")

    @classmethod
    def from_dict(cls, raw: dict):
        kwargs = {}
        floats = ("w0", "k1", "k2", "k3", "theta_straight", "theta_moderate",
                  "w_max", "lane_center")
        for key, value in raw.items():
            if key in floats:
                kwargs[key] = float(value)
            elif key == "deadband":
                kwargs[key] = str(value).strip().lower() in ("1", "true", "yes", "on")
        return cls(**kwargs)


@dataclass(frozen=True)
class DroiResult:
    w_c: float
    regime: str                # straight | moderate | sharp
    shift: float               # lateral offset, meters (signed)
    roi: tuple                 # (x_min, y_min, x_max, y_max), normalized


DEFAULT_HORIZON_BAND = (0.45, 0.95)


def critical_width(theta: float, v: float, cfg: DroiConfig,
                   horizon_band=DEFAULT_HORIZON_BAND) -> DroiResult:
    """Width, regime and ROI for a steering angle (degrees, signed) and speed.

    deadband=False applies w0 + k1|theta| + k2 v verbatim; deadband=True
    replaces |theta| with max(|theta| - theta_straight, 0) so the width is
    continuous across the straight band and equals w0 at theta=0, v=0.
    """
    if v < 0:
        raise DomainError("droi", f"speed must be non-negative, got {v}")
    if abs(theta) > 540:
        raise DomainError("droi", f"|theta| = {abs(theta)} exceeds the 540 deg sanity bound")
    mag = abs(theta)
    if mag <= cfg.theta_straight:
        regime = "straight"
    elif mag <= cfg.theta_moderate:
        regime = "moderate"
    else:
        regime = "sharp"
    steer = max(mag - cfg.theta_straight, 0.0) if cfg.deadband else mag
    w_c = cfg.w0 + cfg.k1 * steer + cfg.k2 * v
    shift = 0.0
    if regime == "sharp":
        sign = 1.0 if theta > 0 else -1.0
        shift = sign * cfg.k3 * (mag - cfg.theta_moderate)
    roi = roi_rectangle(w_c, shift, cfg, horizon_band)
    return DroiResult(w_c, regime, shift, roi)


def roi_rectangle(w_c: float, shift: float, cfg: DroiConfig,
                  horizon_band=DEFAULT_HORIZON_BAND):
    """Map a metric width and lateral shift to a normalized image rectangle.

    The width fraction is w_c / w_max capped at 1; the center is moved by
    shift / w_max and the rectangle is clamped to stay inside the image.
    The vertical extent is the horizon band.
    """
    y_min, y_max = horizon_band
    if not 0.0 <= y_min < y_max <= 1.0:
        raise DomainError("droi", f"horizon band {horizon_band} not inside [0, 1]")
    half = min(w_c / cfg.w_max, 1.0) / 2.0
    center = cfg.lane_center + shift / cfg.w_max
    center = min(max(center, half), 1.0 - half)
    return (center - half, y_min, center + half, y_max)


def replay_trajectory(log, cfg: DroiConfig, horizon_band=DEFAULT_HORIZON_BAND):
    """Per-sample results for a (t, theta, v) log plus the mean ROI-area fraction.

    Timestamps must be strictly increasing. The mean area fraction is the
    computation-saving proxy: 1.0 means the ROI never shrinks below the
    full frame.
    """
    results = []
    area_sum = 0.0
    prev_t = None
    for t, theta, v in log:
        if prev_t is not None and t <= prev_t:
            raise DomainError("droi", f"timestamps not strictly increasing at t={t}")
        prev_t = t
        res = critical_width(theta, v, cfg, horizon_band)
        x1, y1, x2, y2 = res.roi
        area_sum += (x2 - x1) * (y2 - y1)
        results.append((t, res))
    mean_fraction = area_sum / len(results) if results else 0.0
    return results, mean_fraction


def load_trajectory_csv(path):
    """CSV `t,theta_deg,speed_mps`; a non-numeric first line is a header."""
    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise DomainError("droi", f"{path}:{line_no}: expected t,theta_deg,speed_mps")
            try:
                rows.append((float(parts[0]), float(parts[1]), float(parts[2])))
            except ValueError:
                if line_no == 1:
                    continue  # header
                raise DomainError("droi", f"{path}:{line_no}: unparsable row {line!r}") from None
    return rows


def replay_to_csv_rows(results):
    """`t,w_c,regime,x_min,y_min,x_max,y_max` rows for the output CSV."""
    rows = ["t,w_c,regime,x_min,y_min,x_max,y_max"]
    for t, res in results:
        x1, y1, x2, y2 = res.roi
        rows.append(f"{t:.17g},{res.w_c:.17g},{res.regime},"
                    f"{x1:.17g},{y1:.17g},{x2:.17g},{y2:.17g}")
    return rows
