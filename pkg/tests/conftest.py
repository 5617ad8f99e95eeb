import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from evdiffi.forest import LEAF, ForestParams, IsolationForest, IsolationTree  # noqa: E402

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

META = "session_id,station_id,start_time,end_time,energy_kwh,co2_kg\n"
SIGNALS = "session_id,timestamp,power_kw,temperature_c\n"


def _stamp(minute: int) -> str:
    return f"2023-05-01T{10 + minute // 60:02d}:{minute % 60:02d}:00Z"


def build_fixture_corpus(tmp_path: Path) -> tuple[Path, Path]:
    """10 valid sessions and 3 invalid ones (missing signal, too short, NaN power)."""
    meta, sig = [META], [SIGNALS]
    for i in range(10):
        sid = f"V{i}"
        n = 5 + i
        meta.append(f"{sid},ST1,{_stamp(0)},{_stamp(n)},{1.5 + i},{0.4 + i / 10}\n")
        for m in range(n):
            sig.append(f"{sid},{_stamp(m)},{7 + (m % 3) + i / 10},{20 + m / 2}\n")
    meta.append(f"BAD_NOSIG,ST2,{_stamp(0)},{_stamp(5)},1.0,0.2\n")
    meta.append(f"BAD_SHORT,ST2,{_stamp(0)},{_stamp(2)},1.0,0.2\n")
    sig += [f"BAD_SHORT,{_stamp(0)},7.0,20.0\n", f"BAD_SHORT,{_stamp(1)},7.0,20.0\n"]
    meta.append(f"BAD_NAN,ST2,{_stamp(0)},{_stamp(4)},1.0,0.2\n")
    sig += [f"BAD_NAN,{_stamp(m)},{'nan' if m == 2 else '7.0'},20.0\n" for m in range(4)]
    mpath, spath = tmp_path / "sessions_meta.csv", tmp_path / "sessions_signals.csv"
    mpath.write_text("".join(meta))
    spath.write_text("".join(sig))
    return mpath, spath


@pytest.fixture
def fixture_corpus(tmp_path):
    return build_fixture_corpus(tmp_path)


def make_tree(feature, threshold, left, right, n_train):
    return IsolationTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(n_train, dtype=np.int64),
    )


def two_point_tree():
    """Single split isolating the points {0, 100} of a one-feature dataset."""
    return make_tree([0, LEAF, LEAF], [50.0, np.nan, np.nan], [1, LEAF, LEAF], [2, LEAF, LEAF], [2, 1, 1])


def make_forest(trees, d=1, psi=2, max_depth=1):
    params = ForestParams(n_trees=len(trees), subsample_size=psi, max_depth=max_depth)
    return IsolationForest(params, tuple(f"f{j}" for j in range(d)), trees, threshold_score=0.5)
