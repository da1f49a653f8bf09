"""Toy Frechet video distance with a small frozen 3D-conv feature extractor.

The extractor is trained once on clean TemporalShapes videos and shipped in
``vidmask/assets``; its 64-d penultimate activations are the features.
Scores are not comparable with Inception/I3D based FVD numbers.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import FeatureStats, frechet_distance

ASSET_NAME = "fvd_extractor.pt"
FEATURE_DIM = 64


class VideoFeatureNet(nn.Module):
    def __init__(self, num_classes: int = 8, width: int = 16, feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv3d(1, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv3d(width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv3d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.feat = nn.Linear(4 * width, feature_dim)
        self.fc = nn.Linear(feature_dim, num_classes)

    def features(self, videos: torch.Tensor) -> torch.Tensor:
        # videos: [B, T, H, W, 1] in [-1, 1]
        x = self.convs(videos.permute(0, 4, 1, 2, 3))
        return torch.tanh(self.feat(x.mean(dim=(2, 3, 4))))

    def forward(self, videos):
        return self.fc(self.features(videos))


def train_extractor(videos: np.ndarray, labels: np.ndarray, seed: int = 0, steps: int = 600, batch_size: int = 32) -> VideoFeatureNet:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = VideoFeatureNet(int(labels.max()) + 1)
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    v, y = torch.as_tensor(videos), torch.as_tensor(labels)
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(len(y), batch_size))
        loss = F.cross_entropy(net(v[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def save_extractor(net: VideoFeatureNet, path):
    torch.save({"num_classes": net.fc.out_features, "state": net.state_dict()}, Path(path))


def load_extractor(path=None) -> VideoFeatureNet:
    if path is None:
        ref = resources.files("vidmask") / "assets" / ASSET_NAME
        if not ref.is_file():
            raise FileNotFoundError(f"bundled FVD extractor missing; rebuild it with `python -m vidmask.fvd` ({ref})")
        with resources.as_file(ref) as p:
            blob = torch.load(p, map_location="cpu", weights_only=True)
    else:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    net = VideoFeatureNet(blob["num_classes"])
    net.load_state_dict(blob["state"])
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@torch.no_grad()
def extract_features(videos, extractor: VideoFeatureNet, batch_size: int = 256) -> np.ndarray:
    v = torch.as_tensor(np.asarray(videos, dtype=np.float32) if not torch.is_tensor(videos) else videos.float())
    out = [extractor.features(v[i : i + batch_size]) for i in range(0, len(v), batch_size)]
    return torch.cat(out).double().numpy()


def toy_fvd(generated, reference, extractor: VideoFeatureNet | None = None) -> float:
    """Frechet distance between Gaussian fits of extractor features of two video sets."""
    if len(generated) < 2 or len(reference) < 2:
        raise ValueError("need at least two videos on each side")
    extractor = extractor or load_extractor()
    fa = FeatureStats.from_features(extract_features(generated, extractor))
    fb = FeatureStats.from_features(extract_features(reference, extractor))
    return frechet_distance(fa, fb)


def main():
    """Rebuild the bundled extractor from the default TemporalShapes spec."""
    from .shapes import TemporalShapesSpec, generate_temporal_shapes, split_dataset

    splits = split_dataset(generate_temporal_shapes(TemporalShapesSpec(), 4000, seed=12345))
    ds, val = splits["train"], splits["val"]
    net = train_extractor(ds.videos, ds.labels, seed=0)
    with torch.no_grad():
        acc = float((net(torch.as_tensor(val.videos)).argmax(-1).numpy() == val.labels).mean())
    print(f"extractor held-out accuracy {acc:.3f}")
    out = Path(__file__).parent / "assets" / ASSET_NAME
    out.parent.mkdir(exist_ok=True)
    save_extractor(net, out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
