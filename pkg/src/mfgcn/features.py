"""State/measure features shared by controls and regressions.

Tags: ``1``, ``x``, ``x2``, ``mbar``, ``m2``, ``x_mbar``.  ``mbar`` and ``m2``
are the first two moments of the scenario's cloud.
"""
from __future__ import annotations

import numpy as np

FEATURES = ("1", "x", "x2", "mbar", "m2", "x_mbar")
DEFAULT_BASIS = ("1", "x", "mbar")
EXTENDED_BASIS = FEATURES


def validate(features) -> tuple[str, ...]:
    feats = tuple(features)
    if not feats:
        raise ValueError("feature basis must be non-empty")
    for f in feats:
        if f not in FEATURES:
            raise ValueError(f"unknown feature {f!r}; choose from {FEATURES}")
    if len(set(feats)) != len(feats):
        raise ValueError("duplicate features in basis")
    return feats


def feature_values(tag: str, x: np.ndarray, mbar: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """One feature on a (scenario, particle) grid; ``mbar``/``m2`` are per scenario."""
    mb = mbar[:, None]
    if tag == "1":
        return np.ones_like(x)
    if tag == "x":
        return x
    if tag == "x2":
        return x * x
    if tag == "mbar":
        return np.broadcast_to(mb, x.shape)
    if tag == "m2":
        return np.broadcast_to(m2[:, None], x.shape)
    if tag == "x_mbar":
        return x * mb
    raise ValueError(tag)


def evaluate(features, coeffs: np.ndarray, x: np.ndarray, mbar: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """``sum_f coeffs[f] * phi_f(x, mbar, m2)``."""
    out = np.zeros_like(x)
    for c, tag in zip(coeffs, features):
        if c == 0.0:
            continue
        if tag == "1":
            out += c
        elif tag == "x":
            out += c * x
        elif tag == "mbar":
            out += (c * mbar)[:, None]
        elif tag == "m2":
            out += (c * m2)[:, None]
        else:
            out += c * feature_values(tag, x, mbar, m2)
    return out


def design_matrix(features, x: np.ndarray, mbar: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """(features, samples) matrix, samples ordered scenario-major."""
    D = np.empty((len(features), x.size))
    for row, f in zip(D, features):
        row.reshape(x.shape)[...] = feature_values(f, x, mbar, m2)
    return D


def martingale_increment(
    features,
    coeffs: np.ndarray,
    x: np.ndarray,
    mbar: np.ndarray,
    dx_mart: np.ndarray,
    dmbar_mart: np.ndarray,
    dm2_mart: np.ndarray,
) -> np.ndarray:
    """First-order noise part of ``sum_f coeffs[f] * (phi_f(k+1) - phi_f(k))``.

    ``dx_mart`` is the state's noise increment (sigma dW + sigma~ dW~), the
    moment arguments the corresponding increments of the cloud moments.  The
    result has zero conditional mean given the node-k information because every
    term is an adapted coefficient times a future increment.
    """
    out = np.zeros_like(x)
    mb = mbar[:, None]
    for c, tag in zip(coeffs, features):
        if c == 0.0 or tag == "1":
            continue
        if tag == "x":
            out += c * dx_mart
        elif tag == "x2":
            out += 2.0 * c * x * dx_mart
        elif tag == "mbar":
            out += (c * dmbar_mart)[:, None]
        elif tag == "m2":
            out += (c * dm2_mart)[:, None]
        elif tag == "x_mbar":
            out += c * (mb * dx_mart + x * dmbar_mart[:, None])
    return out


def partials(features, coeffs: np.ndarray, x: np.ndarray, mbar: np.ndarray, m2: np.ndarray):
    """(d/dx, d/dmbar) of the fitted function at each sample; ``m2`` is held fixed."""
    mb = np.broadcast_to(mbar[:, None], x.shape)
    dx = np.zeros_like(x)
    dm = np.zeros_like(x)
    for c, tag in zip(coeffs, features):
        if tag == "x":
            dx += c
        elif tag == "x2":
            dx += 2.0 * c * x
        elif tag == "mbar":
            dm += c
        elif tag == "x_mbar":
            dx += c * mb
            dm += c * x
    return dx, dm
