"""Export rendered images as 8-bit PGM or PNG with a value-range sidecar.

Real-valued render images are affinely mapped from [min, max] to 0..255;
the mapping is recorded in a small text sidecar so golden-image tests can
recover the original scale.
"""

import numpy as np


def quantize(image: np.ndarray):
    """Map a real image to uint8, returning (bytes image, vmin, vmax)."""
    img = np.asarray(image, dtype=float)
    vmin = float(img.min())
    vmax = float(img.max())
    span = vmax - vmin
    if span <= 0.0:
        return np.zeros(img.shape, dtype=np.uint8), vmin, vmax
    scaled = np.round((img - vmin) / span * 255.0)
    return scaled.astype(np.uint8), vmin, vmax


def _write_sidecar(path, vmin, vmax):
    with open(str(path) + ".meta.txt", "w") as fh:
        fh.write("min: %r\nmax: %r\n" % (vmin, vmax))


def read_sidecar(path):
    """Return the (min, max) recorded next to an exported image."""
    values = {}
    with open(str(path) + ".meta.txt") as fh:
        for line in fh:
            key, _, value = line.partition(":")
            values[key.strip()] = float(value)
    return values["min"], values["max"]


def save_pgm(image: np.ndarray, path) -> None:
    """Write a binary 8-bit PGM plus the range sidecar."""
    data, vmin, vmax = quantize(image)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())
    _write_sidecar(path, vmin, vmax)


def load_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM written by :func:`save_pgm`."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError("not a binary PGM file: %s" % path)
        dims = fh.readline().split()
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError("unsupported PGM max value %d" % maxval)
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def save_png(image: np.ndarray, path) -> None:
    """Write an 8-bit grayscale PNG plus the range sidecar."""
    from PIL import Image

    data, vmin, vmax = quantize(image)
    Image.fromarray(data, mode="L").save(path)
    _write_sidecar(path, vmin, vmax)


def save_image(image: np.ndarray, path) -> None:
    """Dispatch on the file extension (.pgm or .png)."""
    name = str(path).lower()
    if name.endswith(".png"):
        save_png(image, path)
    elif name.endswith(".pgm"):
        save_pgm(image, path)
    else:
        raise ValueError("unsupported image extension for %s (use .pgm or .png)" % path)
