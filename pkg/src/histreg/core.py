"""Image, geometry and transform primitives shared by the whole package.

Images are plain numpy arrays of shape ``(H, W)`` or ``(H, W, 3)`` holding
floats in ``[0, 1]``.  Pixel centres sit on integer coordinates with the
origin at the top-left pixel, ``x`` growing rightwards and ``y`` downwards.
Point arrays are ``(N, 2)`` in ``(x, y)`` order.

Every transform in this module is callable on a point array and returns an
array of the same shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionMismatch, ParseError, SingularSystem

__all__ = [
    "as_image", "to_gray", "image_diagonal", "load_image", "save_image",
    "AffineTransform2D", "TpsWarp", "SinusoidalWarp", "apply_affine",
    "apply_tps", "compose", "tps_kernel", "resample", "rescale",
    "format_transform", "parse_transforms", "save_transform",
    "load_transforms",
]

LUMA = np.array([0.2126, 0.7152, 0.0722])


def as_image(img, name="image"):
    """Validate ``img`` and return it as a float64 array in ``[0, 1]``."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise ValueError(f"{name}: expected (H, W) or (H, W, 3), got {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name}: empty image")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite samples")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError(f"{name}: samples outside [0, 1]")
    return a


def to_gray(img):
    """Rec.709 luma of an RGB image; grayscale input is returned as-is."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a
    return np.clip(a @ LUMA, 0.0, 1.0)


def image_diagonal(img):
    """Length of the image diagonal in pixels, ``sqrt(W**2 + H**2)``."""
    h, w = np.shape(img)[:2]
    return math.hypot(w, h)


def _points(p):
    a = np.asarray(p, dtype=np.float64)
    if a.shape[-1] != 2:
        raise ValueError(f"points must have a trailing dimension of 2, got {a.shape}")
    return a


# --------------------------------------------------------------------------
# transforms


@dataclass(frozen=True)
class AffineTransform2D:
    """``(x, y) -> (a11 x + a12 y + tx, a21 x + a22 y + ty)``."""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        vals = (self.a11, self.a12, self.a21, self.a22, self.tx, self.ty)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("affine entries must be finite")
        if abs(self.determinant) <= 1e-12:
            raise SingularSystem("affine transform is not invertible")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def translation(cls, tx, ty):
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])

    @classmethod
    def from_params(cls, params):
        """Build from ``(a11, a12, tx, a21, a22, ty)`` (row-major 2x3)."""
        p = [float(v) for v in params]
        return cls(p[0], p[1], p[3], p[4], p[2], p[5])

    @property
    def matrix(self):
        """The 2x3 matrix ``[[a11, a12, tx], [a21, a22, ty]]``."""
        return np.array([[self.a11, self.a12, self.tx],
                         [self.a21, self.a22, self.ty]])

    @property
    def params(self):
        return self.matrix.ravel()

    @property
    def determinant(self):
        return self.a11 * self.a22 - self.a12 * self.a21

    def inverse(self):
        d = self.determinant
        b11, b12 = self.a22 / d, -self.a12 / d
        b21, b22 = -self.a21 / d, self.a11 / d
        return AffineTransform2D(b11, b12, b21, b22,
                                 -(b11 * self.tx + b12 * self.ty),
                                 -(b21 * self.tx + b22 * self.ty))

    def __call__(self, p):
        p = _points(p)
        x, y = p[..., 0], p[..., 1]
        return np.stack([self.a11 * x + self.a12 * y + self.tx,
                         self.a21 * x + self.a22 * y + self.ty], axis=-1)


def apply_affine(t, p):
    return t(p)


def compose(outer, inner):
    """Affine ``outer ∘ inner``: the result maps ``p`` to ``outer(inner(p))``."""
    m = outer.matrix[:, :2] @ inner.matrix
    m[:, 2] += outer.matrix[:, 2]
    return AffineTransform2D.from_matrix(m)


def tps_kernel(r):
    """Biharmonic kernel ``U(r) = r**2 log r`` with ``U(0) = 0``."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


@dataclass(frozen=True, eq=False)
class TpsWarp:
    """Thin-plate spline ``p -> affine(p) + sum_i w_i U(|p - c_i|)``.

    ``weights`` has one 2-vector per control point.
    """

    control_points: np.ndarray
    affine: AffineTransform2D
    weights: np.ndarray
    regularization: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.control_points, dtype=np.float64).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1, 2)
        if c.shape != w.shape:
            raise ValueError("one weight vector per control point is required")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")
        object.__setattr__(self, "control_points", c)
        object.__setattr__(self, "weights", w)

    @classmethod
    def identity(cls, control_points):
        c = np.asarray(control_points, dtype=np.float64).reshape(-1, 2)
        return cls(c, AffineTransform2D(), np.zeros_like(c))

    def __call__(self, p, chunk=65536):
        p = _points(p)
        flat = p.reshape(-1, 2)
        out = self.affine(flat)
        if len(self.control_points):
            for s in range(0, len(flat), chunk):
                q = flat[s:s + chunk]
                d2 = ((q[:, None, :] - self.control_points[None]) ** 2).sum(-1)
                # r^2 log r == 0.5 d2 log d2
                with np.errstate(divide="ignore", invalid="ignore"):
                    u = np.where(d2 > 0, 0.5 * d2 * np.log(d2), 0.0)
                out[s:s + chunk] += u @ self.weights
        return out.reshape(p.shape)


def apply_tps(w, p):
    return w(p)


@dataclass(frozen=True)
class SinusoidalWarp:
    """Affine map followed by a smooth sinusoidal displacement.

    ``q = A p``; the result is
    ``q + amplitude * (sin(2 pi q_y / L + phase_x), sin(2 pi q_x / L + phase_y))``
    with ``L = wavelength``.  Invertible whenever
    ``amplitude < wavelength / (2 pi)`` and ``det A > 0``.
    """

    affine: AffineTransform2D
    amplitude: float = 0.0
    wavelength: float = 1.0
    phase_x: float = 0.0
    phase_y: float = 0.0

    def __call__(self, p):
        q = self.affine(p)
        if self.amplitude == 0:
            return q
        k = 2 * math.pi / self.wavelength
        dx = self.amplitude * np.sin(k * q[..., 1] + self.phase_x)
        dy = self.amplitude * np.sin(k * q[..., 0] + self.phase_y)
        return q + np.stack([dx, dy], axis=-1)

    def jacobian_determinant(self, p):
        q = self.affine(p)
        k = 2 * math.pi / self.wavelength
        a = self.amplitude * k
        cx = np.cos(k * q[..., 1] + self.phase_x)
        cy = np.cos(k * q[..., 0] + self.phase_y)
        return (1.0 - a * a * cx * cy) * self.affine.determinant


# --------------------------------------------------------------------------
# resampling


def _bilinear(img, x, y):
    """Sample ``img`` at float coordinates; zero outside ``[0, W-1] x [0, H-1]``."""
    h, w = img.shape[:2]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        inside = inside[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.where(inside, out, 0.0)


def sample_grid(mapping, width, height, step=1):
    """Evaluate ``mapping`` at every output pixel centre.

    With ``step > 1`` the map is evaluated on a sparse lattice and
    bilinearly interpolated in between, which is accurate for smooth maps.
    Returns ``(X, Y)`` arrays of shape ``(height, width)``.
    """
    if step <= 1:
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        q = mapping(np.stack([xs.ravel(), ys.ravel()], axis=1))
        return q[:, 0].reshape(height, width), q[:, 1].reshape(height, width)
    gx = np.arange(0, width - 1 + step, step, dtype=np.float64)
    gy = np.arange(0, height - 1 + step, step, dtype=np.float64)
    GX, GY = np.meshgrid(gx, gy)
    q = mapping(np.stack([GX.ravel(), GY.ravel()], axis=1))
    QX = q[:, 0].reshape(GY.shape)
    QY = q[:, 1].reshape(GY.shape)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    u, v = xs / step, ys / step
    i0 = np.minimum(np.floor(u).astype(np.intp), len(gx) - 2) if len(gx) > 1 else np.zeros_like(u, np.intp)
    j0 = np.minimum(np.floor(v).astype(np.intp), len(gy) - 2) if len(gy) > 1 else np.zeros_like(v, np.intp)
    fu = u - i0
    fv = v - j0
    i1 = np.minimum(i0 + 1, len(gx) - 1)
    j1 = np.minimum(j0 + 1, len(gy) - 1)

    def interp(F):
        return ((F[j0, i0] * (1 - fu) + F[j0, i1] * fu) * (1 - fv)
                + (F[j1, i0] * (1 - fu) + F[j1, i1] * fu) * fv)

    return interp(QX), interp(QY)


def resample(img, sample_map, out_width, out_height, step=1):
    """Render ``img`` on a new ``out_height x out_width`` grid.

    ``sample_map`` maps output pixel coordinates to input coordinates
    (inverse mapping): to move content by an affine ``T``, pass
    ``T.inverse()``.  Bilinear interpolation, zero fill outside the input.
    """
    img = np.asarray(img, dtype=np.float64)
    X, Y = sample_grid(sample_map, int(out_width), int(out_height), step)
    return np.clip(_bilinear(img, X, Y), 0.0, 1.0)


def rescale(img, scale):
    """Resize by ``scale`` keeping the pixel-centre convention.

    Output pixel ``u`` samples input position ``(u + 0.5) / scale - 0.5``.
    Downscaling pre-smooths with a Gaussian to limit aliasing.
    """
    img = np.asarray(img, dtype=np.float64)
    if scale == 1:
        return img.copy()
    h, w = img.shape[:2]
    oh, ow = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    src = img
    if scale < 1:
        sigma = 0.5 / scale * 0.8
        sig = (sigma, sigma, 0) if img.ndim == 3 else sigma
        src = gaussian_filter(img, sig, mode="nearest")
    xs = np.clip((np.arange(ow) + 0.5) / scale - 0.5, 0, w - 1)
    ys = np.clip((np.arange(oh) + 0.5) / scale - 0.5, 0, h - 1)
    X, Y = np.meshgrid(xs, ys)
    return np.clip(_bilinear(src, X, Y), 0.0, 1.0)


# --------------------------------------------------------------------------
# image I/O


def load_image(path):
    """Read an 8/16-bit PNG or TIFF (gray or RGB) as floats in ``[0, 1]``."""
    path = str(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(path)
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[..., :3]
        raw = raw[..., ::-1]
    if raw.dtype == np.uint8:
        out = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        out = raw.astype(np.float64) / 65535.0
    else:
        out = np.clip(raw.astype(np.float64), 0.0, 1.0)
    return np.ascontiguousarray(out)


def save_image(path, img, bits=8):
    """Write ``img`` as PNG/TIFF, scaling by 255 (or 65535) with round-half-up."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        raw = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    elif bits == 16:
        raw = np.floor(img * 65535.0 + 0.5).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if raw.ndim == 3:
        raw = raw[..., ::-1]
    path = Path(path)
    params = []
    if path.suffix.lower() in (".tif", ".tiff"):
        params = [cv2.IMWRITE_TIFF_COMPRESSION, 5]
    if not cv2.imwrite(str(path), np.ascontiguousarray(raw), params):
        raise OSError(f"could not write {path}")


def same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionMismatch(f"shapes differ: {np.shape(a)} vs {np.shape(b)}")


# --------------------------------------------------------------------------
# transform text format


def _fmt(v):
    return format(float(v), ".17g")


def format_transform(t, role=None):
    """Serialise one transform as a text block (17 significant digits)."""
    lines = []
    if isinstance(t, AffineTransform2D):
        lines.append("type = affine")
        if role:
            lines.append(f"role = {role}")
        lines.append("matrix = " + " ".join(_fmt(v) for v in t.params))
    elif isinstance(t, TpsWarp):
        lines.append("type = tps")
        if role:
            lines.append(f"role = {role}")
        lines.append(f"lambda = {_fmt(t.regularization)}")
        lines.append("affine = " + " ".join(_fmt(v) for v in t.affine.params))
        lines.append(f"control_points = {len(t.control_points)}")
        for c, w in zip(t.control_points, t.weights):
            lines.append("cp = " + " ".join(_fmt(v) for v in (*c, *w)))
    elif isinstance(t, SinusoidalWarp):
        lines.append("type = sinusoid")
        if role:
            lines.append(f"role = {role}")
        lines.append("affine = " + " ".join(_fmt(v) for v in t.affine.params))
        lines.append(f"amplitude = {_fmt(t.amplitude)}")
        lines.append(f"wavelength = {_fmt(t.wavelength)}")
        lines.append(f"phase = {_fmt(t.phase_x)} {_fmt(t.phase_y)}")
    else:
        raise TypeError(f"cannot serialise {type(t).__name__}")
    return "\n".join(lines) + "\n"


def _floats(value, n, path, lineno):
    try:
        vals = [float(v) for v in value.split()]
    except ValueError:
        raise ParseError(f"expected numbers, got {value!r}", path, lineno) from None
    if n is not None and len(vals) != n:
        raise ParseError(f"expected {n} numbers, got {len(vals)}", path, lineno)
    return vals


def _build(block, path):
    kind = block.get("type")
    if kind is None:
        raise ParseError("block without a 'type' field", path, block["_line"])
    lineno = block["_line"]
    try:
        if kind == "affine":
            ln, v = block["matrix"]
            return AffineTransform2D.from_params(_floats(v, 6, path, ln))
        if kind == "tps":
            ln, v = block["affine"]
            aff = AffineTransform2D.from_params(_floats(v, 6, path, ln))
            lam = float(block.get("lambda", (0, "0"))[1])
            cps = [_floats(v, 4, path, ln) for ln, v in block.get("cp", [])]
            n = int(block["control_points"][1])
            if n != len(cps):
                raise ParseError(f"control_points = {n} but {len(cps)} cp lines", path, lineno)
            arr = np.array(cps, dtype=np.float64).reshape(-1, 4)
            return TpsWarp(arr[:, :2], aff, arr[:, 2:], lam)
        if kind == "sinusoid":
            ln, v = block["affine"]
            aff = AffineTransform2D.from_params(_floats(v, 6, path, ln))
            px, py = _floats(block["phase"][1], 2, path, block["phase"][0])
            return SinusoidalWarp(aff, float(block["amplitude"][1]),
                                  float(block["wavelength"][1]), px, py)
    except KeyError as exc:
        raise ParseError(f"{kind} block missing field {exc.args[0]!r}", path, lineno) from None
    raise ParseError(f"unknown transform type {kind!r}", path, lineno)


def parse_transforms(text, path=None):
    """Parse a transform file into ``[(transform, role, extras), ...]``.

    Blocks are separated by ``---`` lines; ``#`` starts a comment.
    ``extras`` holds any key/value pairs not used by the transform itself.
    """
    blocks = []
    cur = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "---":
            cur = None
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if cur is None:
            cur = {"_line": lineno}
            blocks.append(cur)
        if key == "cp":
            cur.setdefault("cp", []).append((lineno, value))
        elif key == "type":
            cur["type"] = value
        else:
            cur[key] = (lineno, value)
    out = []
    for b in blocks:
        if b.get("type") in (None, "diagnostics"):
            extras = {k: v[1] for k, v in b.items() if k not in ("_line", "type")}
            out.append((None, b.get("type"), extras))
            continue
        t = _build(b, path)
        role = b.get("role", (0, None))[1]
        used = {"_line", "type", "role", "matrix", "affine", "lambda", "cp",
                "control_points", "amplitude", "wavelength", "phase"}
        extras = {k: v[1] for k, v in b.items() if k not in used}
        out.append((t, role, extras))
    return out


def save_transform(path, transforms):
    """Write one transform or a list of ``(transform, role)`` pairs."""
    if not isinstance(transforms, (list, tuple)):
        transforms = [(transforms, None)]
    parts = [format_transform(t, role) for t, role in transforms]
    Path(path).write_text("# histreg transform v1\n" + "---\n".join(parts))


def load_transforms(path):
    return parse_transforms(Path(path).read_text(), path=str(path))
