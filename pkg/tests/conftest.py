import json

import numpy as np
import pytest

from oodseg.io import write_image, write_label_map


def make_negative_files(root, n_samples=6, size=40, class_pool=(5, 6, 7, 8), seed=99):
    """Write a tiny on-disk negative dataset plus its JSONL catalog manifest."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_samples):
        image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        labels = np.zeros((size, size), dtype=np.uint8)
        present = sorted(rng.choice(class_pool, size=2, replace=False).tolist())
        # two solid rectangles so class regions are well above the 32-px floor
        labels[4 : size // 2, 4 : size - 4] = present[0]
        labels[size // 2 : size - 4, 4 : size - 4] = present[1]
        img_name = f"neg_{i:03d}.png"
        lab_name = f"neg_{i:03d}_labels.png"
        write_image(root / img_name, image)
        write_label_map(root / lab_name, labels)
        records.append(
            {"image": img_name, "label": lab_name, "classes": [0] + present}
        )
    catalog_path = root / "catalog.jsonl"
    with open(catalog_path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return catalog_path


def make_manifest_files(root, n=4, size=48, seed=7):
    """Write training images/labels plus a JSONL manifest."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        labels = rng.integers(0, 4, size=(size, size)).astype(np.uint8)
        write_image(root / f"img_{i:03d}.png", image)
        write_label_map(root / f"img_{i:03d}_labels.png", labels)
        lines.append(
            json.dumps(
                {"image": f"img_{i:03d}.png", "label": f"img_{i:03d}_labels.png"}
            )
        )
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@pytest.fixture(scope="session")
def negative_catalog_path(tmp_path_factory):
    return make_negative_files(tmp_path_factory.mktemp("negatives"))


@pytest.fixture(scope="session")
def manifest_path(tmp_path_factory):
    return make_manifest_files(tmp_path_factory.mktemp("dataset"))
