import os
from pathlib import Path

import numpy as np
import pytest

from fusionact.data import MOTIONSENSE_COLUMNS, UCIHAR_LABELS, UCIHAR_SIGNALS

# class-specific signal shape: static classes are offsets (posture), dynamic
# classes are oscillations at different frequencies (gait)
_STATIC_OFFSETS = {"SI": 0.8, "ST": -0.6, "LA": 2.0}
_DYNAMIC_FREQS = {"WA": 2.0, "WU": 3.5, "WD": 5.0, "JG": 7.0}


def synth_signal(rng, label: str, channels: int, length: int, noise: float = 0.3) -> np.ndarray:
    t = np.arange(length) / 50.0
    sig = rng.normal(scale=noise, size=(channels, length))
    if label in _STATIC_OFFSETS:
        sig += _STATIC_OFFSETS[label] * np.linspace(1.0, -1.0, channels)[:, None]
    else:
        phase = rng.uniform(0, 2 * np.pi, size=(channels, 1))
        sig += np.sin(2 * np.pi * _DYNAMIC_FREQS[label] * t[None, :] + phase)
    return sig


def write_ucihar(root: Path, per_class: dict[str, int], subjects: dict[str, list[int]], seed: int = 0) -> Path:
    """Published UCI-HAR layout with synthetic windows; returns the dataset root."""
    rng = np.random.default_rng(seed)
    for split, subj_ids in subjects.items():
        base = root / split
        (base / "Inertial Signals").mkdir(parents=True, exist_ok=True)
        rows, ys, ss = [], [], []
        for s in subj_ids:
            for label_id, label in enumerate(UCIHAR_LABELS, start=1):
                for _ in range(per_class[split]):
                    rows.append(synth_signal(rng, label, 9, 128))
                    ys.append(label_id)
                    ss.append(s)
        X = np.stack(rows)
        for c, sig in enumerate(UCIHAR_SIGNALS):
            np.savetxt(base / "Inertial Signals" / f"{sig}_{split}.txt", X[:, c, :], fmt="%.8e")
        np.savetxt(base / f"y_{split}.txt", np.array(ys), fmt="%d")
        np.savetxt(base / f"subject_{split}.txt", np.array(ss), fmt="%d")
    return root


def write_motionsense(root: Path, subjects: int = 6, length: int = 320, seed: int = 0) -> Path:
    """A_DeviceMotion_data layout: <code>_<trial>/sub_<id>.csv with an index column."""
    rng = np.random.default_rng(seed)
    codes = {"dws": ("WD", 1), "ups": ("WU", 3), "wlk": ("WA", 7), "jog": ("JG", 9), "sit": ("SI", 5), "std": ("ST", 6)}
    base = root / "A_DeviceMotion_data"
    for code, (label, trial) in codes.items():
        d = base / f"{code}_{trial}"
        d.mkdir(parents=True, exist_ok=True)
        for s in range(1, subjects + 1):
            data = synth_signal(rng, label if label in _STATIC_OFFSETS or label in _DYNAMIC_FREQS else "SI", 12, length)
            with open(d / f"sub_{s}.csv", "w") as fh:
                fh.write("," + ",".join(MOTIONSENSE_COLUMNS) + "\n")
                for i in range(length):
                    fh.write(f"{i}," + ",".join(f"{v:.8f}" for v in data[:, i]) + "\n")
    return root


@pytest.fixture(scope="session")
def ucihar_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("ucihar") / "UCI HAR Dataset"
    return write_ucihar(root, {"train": 4, "test": 3}, {"train": [1, 3, 5, 6, 7], "test": [2, 4, 9]})


@pytest.fixture(scope="session")
def motionsense_root(tmp_path_factory) -> Path:
    return write_motionsense(tmp_path_factory.mktemp("motionsense"))


def real_root(env: str, default: str) -> Path | None:
    path = Path(os.environ.get(env, default))
    return path if path.exists() else None


# ---------------------------------------------------------------------------
# independent oracles


def conv1d_oracle(x, w, b, stride=1, padding=0, groups=1):
    """Nested-loop grouped cross-correlation with zero padding."""
    B, C, T = x.shape
    O, Cg, K = w.shape
    Og = O // groups
    T_out = (T + 2 * padding - K) // stride + 1
    y = np.zeros((B, O, T_out))
    for n in range(B):
        for o in range(O):
            g = o // Og
            for t in range(T_out):
                acc = 0.0 if b is None else b[o]
                for c in range(Cg):
                    for k in range(K):
                        pos = t * stride + k - padding
                        if 0 <= pos < T:
                            acc += w[o, c, k] * x[n, g * Cg + c, pos]
                y[n, o, t] = acc
    return y


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
