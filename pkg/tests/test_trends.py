import os
import unittest

from tripose.benchmark import BASELINE, GUIDED, run_benchmark, summarize_trends
from tripose.datagen import (
    MOTION_KINDS,
    BenchmarkManifest,
    MotionSpec,
    expand_manifest,
    generate_motion,
)
from tripose.measurement import extract_measurements
from tripose.reports import build_report
from tripose.sampler import GuidanceConfig, make_schedule
from tripose.skeleton import default_skeleton
from tripose.training import TrainConfig, train_denoiser

RUN_SLOW = os.getenv("TRIPOSE_RUN_SLOW") == "1"


def training_set(skeleton):
    out = []
    for seed in range(4):
        for kind in MOTION_KINDS:
            poses = generate_motion(MotionSpec(kind, 240, seed=100 + seed), skeleton)
            out.append((poses, extract_measurements(poses, skeleton, 0.0, 0.0, seed=seed)))
    return out


@unittest.skipUnless(RUN_SLOW, "set TRIPOSE_RUN_SLOW=1 to train and benchmark")
class TrendReproductionTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        base = default_skeleton()
        dataset = training_set(base)
        config = TrainConfig(steps=4000)
        guided = train_denoiser(dataset, config).denoiser
        baseline_config = TrainConfig(steps=4000, layout="rotations+locations")
        baseline = train_denoiser(dataset, baseline_config).denoiser
        manifest = BenchmarkManifest.model_validate(
            {
                "grid": {
                    "motions": [
                        {"kind": "walk", "frames": 120, "seed": 1},
                        {"kind": "reach", "frames": 120, "seed": 2},
                        {"kind": "squat", "frames": 120, "seed": 3},
                    ],
                    "presets": ["uniform-0.6", "uniform-1", "uniform-1.4"],
                    "sigma_l": [0.0, 0.05],
                }
            }
        )
        metrics = run_benchmark(
            expand_manifest(manifest),
            base,
            guided,
            make_schedule(50),
            GuidanceConfig(),
            baseline=baseline,
            seed=0,
        )
        cls.summary = summarize_trends(build_report(metrics))

    def trend(self, method):
        return next(t for t in self.summary.scale if t.method == method)

    def test_guided_error_is_flat_across_scales(self):
        self.assertLessEqual(self.trend(GUIDED).flatness, 1.5)

    def test_baseline_degrades_off_scale(self):
        self.assertGreaterEqual(self.trend(BASELINE).degradation, 2.0)

    def test_guided_is_robust_to_location_noise(self):
        self.assertIsNotNone(self.summary.noise_increase_ratio)
        self.assertLessEqual(self.summary.noise_increase_ratio, 0.5)


if __name__ == "__main__":
    unittest.main()
