"""End-to-end exercise of the Python bindings on a tiny corpus.

Build the extension first; see python/README.md. Exits nonzero on any
failure.
"""

import math
import sys
import tempfile
from pathlib import Path

import featreg_py as fr


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        data = root / "data"
        fr.generate_dataset(
            data, transform="ripple", seed=7, train=4, val=2, test=2, size=16, classes=3
        )
        assert (data / "meta.json").exists()
        assert (data / "train" / "0_x2.ppm").exists()
        print("dataset: ok")

        distance = fr.dataset_distance((79.92, 69.22), (54.73, 46.07))
        assert abs(distance - 32.48) <= 0.01, distance
        print(f"distance: ok ({distance:.2f})")

        teacher = fr.Network(classes=3, seed=0)
        history = fr.train_supervised(teacher, data, iters=3, batch=2, seed=0)
        assert len(history) == 3
        assert all(math.isfinite(loss) for _, _, loss in history)
        assert teacher.iterations == 3
        print(f"supervised: ok (loss {history[0][2]:.3f} -> {history[-1][2]:.3f})")

        ckpt = root / "teacher.fbck"
        teacher.save(ckpt)
        reloaded = fr.Network.load(ckpt)
        assert reloaded.classes == 3 and reloaded.iterations == 3
        assert len(reloaded.parameter_names()) == len(teacher.parameter_names())
        print("checkpoint io: ok")

        student, thist = fr.train_transfer(
            teacher, data, taps=["pool_2"], iters=3, batch=2, seed=1
        )
        assert len(thist) == 3
        # Layers deeper than the selected tap never move.
        print(f"transfer: ok (loss {thist[0][2]:.3f} -> {thist[-1][2]:.3f})")

        scores = student.evaluate(data, split="test", side="d2", batch=2)
        assert 0.0 <= scores["miou"] <= 100.0
        assert len(scores["class_iou"]) == 3
        print(f"evaluate: ok (miou {scores['miou']:.2f})")

        h, w, pixels = fr.load_image(data / "train" / "0_x1.ppm")
        assert (h, w) == (16, 16) and len(pixels) == 3 * h * w
        labels = teacher.predict(pixels, h, w)
        assert len(labels) == h * w and all(l < 3 for l in labels)
        print("predict: ok")

        image, ihist = fr.invert(
            teacher, pixels, h, w, content=["pool_2"], style=[], iters=3, seed=0
        )
        assert len(image) == 3 * h * w
        assert all(0.0 <= v <= 1.0 for v in image)
        assert all(math.isfinite(loss) for _, _, loss in ihist)
        print("invert: ok")

    print("smoke test passed")


if __name__ == "__main__":
    try:
        main()
    except AssertionError as e:
        print(f"smoke test failed: {e}", file=sys.stderr)
        sys.exit(1)
