"""Smoke test for the f2f_lio Python module.

Build the extension first:

    cargo build --release -p f2f-lio-py

The script imports an installed f2f_lio if there is one, otherwise it loads
the shared library from target/release.
"""

import importlib.machinery
import importlib.util
import math
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import f2f_lio

        return f2f_lio
    except ImportError:
        pass
    names = {"linux": "libf2f_lio.so", "darwin": "libf2f_lio.dylib", "win32": "f2f_lio.dll"}
    lib = ROOT / "target" / "release" / names.get(sys.platform, "libf2f_lio.so")
    if not lib.exists():
        sys.exit(f"{lib} not found; run `cargo build --release -p f2f-lio-py` first")
    loader = importlib.machinery.ExtensionFileLoader("f2f_lio", str(lib))
    spec = importlib.util.spec_from_file_location("f2f_lio", lib, loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    lio = load_module()
    assert set(lio.SCENARIOS) == {"corridor", "room-orbit", "figure-eight"}

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "corridor"
        cfg = lio.simulate("corridor", 7, str(data), duration=12.0)
        result = lio.run(str(cfg))
        m = result["metrics"]
        print(f"corridor: {result['keyframes']} keyframes, ATE {m['ate_m']:.4f} m over {m['distance_m']:.1f} m")
        assert result["failure"] is None
        assert m["ate_m"] < 0.05
        for name in ["trajectory.txt", "attitude_std.txt", "calibration.txt", "metrics.txt"]:
            assert (data / "result" / name).exists(), name

        again = lio.evaluate(str(data / "result" / "trajectory.txt"), str(data / "truth.txt"))
        assert math.isclose(again["ate_m"], m["ate_m"], rel_tol=1e-6, abs_tol=1e-9)

        try:
            lio.simulate("nowhere", 1, str(Path(tmp) / "bad"))
        except ValueError as e:
            print(f"unknown scenario rejected: {e}")
        else:
            raise AssertionError("unknown scenario accepted")

    run = lio.run_scenario("room-orbit", seed=2, duration=15.0, miscalibrated=True)
    t, roll, pitch, yaw, lx, ly, lz, td_ms = run["calibration"][-1]
    print(
        f"room-orbit: ATE {run['metrics']['ate_m']:.4f} m, extrinsic ({roll:.2f}, {pitch:.2f}, {yaw:.2f}) deg, "
        f"lever ({lx:.3f}, {ly:.3f}, {lz:.3f}) m, td {td_ms:.2f} ms"
    )
    assert len(run["trajectory"]) == run["keyframes"]
    assert all(len(row) == 8 for row in run["trajectory"])
    print("ok")


if __name__ == "__main__":
    main()
