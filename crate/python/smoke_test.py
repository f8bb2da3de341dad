"""Smoke test for the tumorseg Python bindings.

Build first:
    cargo build -p tumorseg-py --release --features extension-module
then run:
    python3 python/smoke_test.py [path/to/libtumorseg_py.so]
"""

import importlib.util
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def find_library():
    if len(sys.argv) > 1:
        return Path(sys.argv[1])
    for profile in ("release", "debug"):
        for name in ("libtumorseg_py.so", "libtumorseg_py.dylib", "tumorseg_py.dll"):
            path = ROOT / "target" / profile / name
            if path.exists():
                return path
    sys.exit("libtumorseg_py not found; build it with cargo first")


def load(lib, workdir):
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    target = Path(workdir) / f"tumorseg_py{suffix}"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("tumorseg_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    with tempfile.TemporaryDirectory() as tmp:
        ts = load(find_library(), tmp)
        print("tumorseg_py", ts.__version__)

        assert ts.lr_at_step(0, 2000, 5e-4, 1000) == 0.0
        assert abs(ts.lr_at_step(1000, 2000, 5e-4, 1000) - 5e-4) < 1e-15
        assert abs(ts.lr_at_step(1500, 2000, 5e-4, 1000) - 2.5e-4) < 1e-15

        ids = [f"case{i}" for i in range(11)]
        folds = ts.make_folds(ids, 5, 0)
        vals = sorted(v for _, val in folds for v in val)
        assert vals == sorted(ids)
        assert [len(val) for _, val in folds] == [3, 2, 2, 2, 2]

        assert ts.region_dice([0, 0], [0, 0]) == (1.0, 1.0, 1.0)
        assert ts.region_dice([4, 2], [4, 0])[0] == 1.0

        cfg = ts.Config()
        assert cfg.depth == 7
        assert ts.Config.from_toml(cfg.to_toml()).hash() == cfg.hash()
        small = ts.Config.variant("ds").desk_scale()
        assert small.depth == 4 and small.patch_size == [32, 32, 32]
        try:
            ts.Config.from_toml("[model]\nbogus = 1\n")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown key accepted")

        model = ts.Model(small, seed=1)
        assert model.count_parameters() > 0
        n = 16 ** 3
        x = [math.sin(i * 0.01) for i in range(4 * n)]
        p = model.predict(x, [4, 16, 16, 16])
        assert len(p) == 3 * n and all(0.0 < v < 1.0 for v in p)

        probs = [0.9] * n + [0.9] * n + [0.9] * n
        labels = ts.postprocess_probabilities(probs, [16, 16, 16])
        assert set(labels) == {4}
        labels = ts.postprocess_probabilities(probs, [16, 16, 16], "et_threshold = 0.95\n")
        assert set(labels) == {1}

        data = Path(tmp) / "data"
        got = ts.generate_synthetic(str(data), 5, size=16, seed=2)
        assert len(got) == 5
        dims, values = ts.read_nifti(str(data / f"{got[0]}_seg.nii.gz"))
        assert dims == [16, 16, 16] and set(values) <= {0.0, 1.0, 2.0, 4.0}
        assert ts.prepare(str(Path(tmp) / "ws"), str(data), folds=5, seed=0) == 5

    print("smoke test passed")


if __name__ == "__main__":
    main()
