"""Trace-window image encoders: line chart, heat map, scatter plot, and
the multi-granularity Gramian angular field composite.

All encoders are deterministic integer-grid rasterizers with no
anti-aliasing, so outputs are bit-reproducible.  Pixels are float64 in
[0, 1]; in-traffic renders on channel 0 (R), out-traffic on channel 2 (B).
Raster export is binary P6 (maxval 255) with optional PNG behind a flag.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trafficbench import kernels
from trafficbench.ingest import ContractError, RateTrace, resample

REPRESENTATIONS = ("line_chart", "heat_map", "scatter", "gaf")
DEFAULT_IMAGE_SIZE = 224


@dataclass(frozen=True)
class ImageTensor:
    pixels: np.ndarray  # H x W x 3 float64 in [0, 1]
    representation: str
    source: tuple = ()  # (device_id/direction, start index, stop index)

    def __post_init__(self):
        px = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float64))
        if px.ndim != 3 or px.shape[2] != 3:
            raise ContractError("pixels must be H x W x 3")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ContractError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class GafConfig:
    gaf_num: int = 4
    granularity_multipliers: tuple = (1, 5, 15, 60)

    def __post_init__(self):
        if self.gaf_num not in (1, 2, 4):
            raise ContractError("gaf_num must be 1, 2, or 4 (tileable counts)")
        mults = tuple(int(m) for m in self.granularity_multipliers)[: self.gaf_num]
        if len(mults) != self.gaf_num:
            raise ContractError("need one granularity multiplier per tile")
        if any(b <= a for a, b in zip(mults, mults[1:])) or mults[0] < 1:
            raise ContractError("granularity multipliers must be strictly increasing")
        object.__setattr__(self, "granularity_multipliers", mults)


def _window_scale(win_in: np.ndarray, win_out: np.ndarray) -> float:
    peak = max(float(win_in.max()), float(win_out.max()))
    return peak if peak > 0 else 1.0  # flat-zero windows use [0, 1]


def encode_line_chart(win_in: np.ndarray, win_out: np.ndarray, size: int) -> ImageTensor:
    """Polyline raster: time on x, rate on y scaled to [0, window max]."""
    win_in, win_out = _check_window(win_in, win_out)
    img = np.zeros((size, size, 3))
    ymax = _window_scale(win_in, win_out)
    for series, channel in ((win_in, 0), (win_out, 2)):
        xs, ys = _grid_points(series, size, ymax)
        kernels.draw_polyline(img, xs, ys, channel)
    return ImageTensor(img, "line_chart")


def encode_heat_map(win_in: np.ndarray, win_out: np.ndarray, size: int) -> ImageTensor:
    """Time-binned columns; column intensity is the bin's mean rate
    normalized by the window maximum (in on R, out on B)."""
    win_in, win_out = _check_window(win_in, win_out)
    img = np.zeros((size, size, 3))
    ymax = _window_scale(win_in, win_out)
    n = len(win_in)
    for series, channel in ((win_in, 0), (win_out, 2)):
        for col in range(size):
            a = col * n // size
            b = max(a + 1, (col + 1) * n // size)
            img[:, col, channel] = float(series[a:b].mean()) / ymax
    return ImageTensor(np.clip(img, 0.0, 1.0), "heat_map")


def encode_scatter(win_in: np.ndarray, win_out: np.ndarray, size: int) -> ImageTensor:
    """Single-pixel stamps at (time, rate) on separate channels."""
    win_in, win_out = _check_window(win_in, win_out)
    img = np.zeros((size, size, 3))
    ymax = _window_scale(win_in, win_out)
    for series, channel in ((win_in, 0), (win_out, 2)):
        xs, ys = _grid_points(series, size, ymax)
        img[size - 1 - ys, xs, channel] = 1.0
    return ImageTensor(img, "scatter")


def gaf_matrix(series: np.ndarray) -> np.ndarray:
    """Summation-variant Gramian angular field of a rate series.

    Min-max rescales to [-1, 1], embeds as angles phi = arccos, and returns
    cos(phi_i + phi_j).  A constant series rescales to all zeros (midpoint
    rule), giving the all -1 matrix.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ContractError("series must be 1-D with length >= 2")
    lo, hi = float(x.min()), float(x.max())
    if hi > lo:
        # (x - lo)/(hi - lo) puts the extremes at exactly 0 and 1, keeping
        # the endpoint angles exact (arccos is singular at +/-1)
        scaled = 2.0 * ((x - lo) / (hi - lo)) - 1.0
    else:
        scaled = np.zeros_like(x)
    scaled = np.clip(scaled, -1.0, 1.0)
    phi = np.arccos(scaled)
    return np.cos(phi[:, None] + phi[None, :])


def encode_gaf_composite(
    trace: RateTrace,
    center: int,
    cfg: GafConfig,
    size: int,
    window_len: int = 60,
) -> ImageTensor:
    """Tile per-granularity GAF matrices fine-to-coarse, row-major.

    Each tile is the GAF of a ``window_len``-sample window centered at
    ``center`` after resampling the trace by that tile's granularity
    multiplier, rendered nearest-pixel and mapped to pixels as (G + 1) / 2
    on all three channels.
    """
    tiles = []
    for mult in cfg.granularity_multipliers:
        view = trace if mult == 1 else resample(trace, trace.granularity_s * mult)
        c = center // mult
        start = c - window_len // 2
        stop = start + window_len
        if start < 0 or stop > len(view.rates):
            raise ContractError(
                f"trace too short for a {window_len}-sample window at x{mult} granularity"
            )
        tiles.append(gaf_matrix(view.rates[start:stop]))
    grid = {1: (1, 1), 2: (1, 2), 4: (2, 2)}[cfg.gaf_num]
    th, tw = size // grid[0], size // grid[1]
    img = np.zeros((size, size, 3))
    for i, g in enumerate(tiles):
        r, c = divmod(i, grid[1])
        tile = _render_matrix((g + 1.0) / 2.0, th, tw)
        img[r * th:(r + 1) * th, c * tw:(c + 1) * tw, :] = tile[:, :, None]
    return ImageTensor(img, "gaf", source=(trace.device_id, center))


def encode_window(
    representation: str,
    win_in: np.ndarray,
    win_out: np.ndarray,
    size: int,
    trace: RateTrace | None = None,
    center: int | None = None,
    gaf_cfg: GafConfig | None = None,
) -> ImageTensor:
    """Uniform dispatch over the four representations."""
    if representation == "line_chart":
        return encode_line_chart(win_in, win_out, size)
    if representation == "heat_map":
        return encode_heat_map(win_in, win_out, size)
    if representation == "scatter":
        return encode_scatter(win_in, win_out, size)
    if representation == "gaf":
        if trace is None or center is None:
            raise ContractError("gaf encoding needs the source trace and center index")
        return encode_gaf_composite(trace, center, gaf_cfg or GafConfig(), size)
    raise ContractError(f"unknown representation {representation!r}")


def export_raster(img: ImageTensor, path, compressed: bool = False) -> None:
    """Write a lossless raster: binary P6 by default, PNG when requested."""
    path = Path(path)
    data = np.round(img.pixels * 255.0).astype(np.uint8)
    try:
        if compressed:
            from PIL import Image

            Image.fromarray(data, mode="RGB").save(path, format="PNG")
        else:
            with open(path, "wb") as fh:
                fh.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
                fh.write(data.tobytes())
    except OSError as exc:
        raise OSError(f"raster export failed for {path}: {exc}") from exc


def load_raster(path) -> np.ndarray:
    """Read back a P6 or PNG raster as float64 pixels in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P6":
        fields = []
        pos = 2
        while len(fields) < 3:
            while raw[pos] in b" \t\r\n":
                pos += 1
            if raw[pos] == ord("#"):
                pos = raw.index(b"\n", pos) + 1
                continue
            end = pos
            while raw[end] not in b" \t\r\n":
                end += 1
            fields.append(int(raw[pos:end]))
            pos = end
        pos += 1
        w, h, maxval = fields
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
        return data.reshape(h, w, 3).astype(np.float64) / maxval
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _check_window(win_in, win_out):
    win_in = np.asarray(win_in, dtype=np.float64)
    win_out = np.asarray(win_out, dtype=np.float64)
    if win_in.size == 0 or win_out.size == 0:
        raise ContractError("window must be non-empty")
    if win_in.shape != win_out.shape:
        raise ContractError("in/out windows must have equal length")
    return win_in, win_out


def _grid_points(series: np.ndarray, size: int, ymax: float):
    n = len(series)
    if n == 1:
        xs = np.zeros(1, dtype=np.int64)
    else:
        xs = np.round(np.arange(n) * (size - 1) / (n - 1)).astype(np.int64)
    ys = np.round(np.clip(series / ymax, 0.0, 1.0) * (size - 1)).astype(np.int64)
    return xs, ys


def _render_matrix(m: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Nearest-pixel resize of a square matrix onto a th x tw tile."""
    n = m.shape[0]
    rows = (np.arange(th) * n // th).astype(np.int64)
    cols = (np.arange(tw) * n // tw).astype(np.int64)
    return m[np.ix_(rows, cols)]
