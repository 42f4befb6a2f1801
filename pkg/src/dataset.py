from typing import Any, Dict, List, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from graphio import WindowSample


class WindowDataset(Dataset):
    def __init__(self, samples: Sequence[WindowSample]):
        self.items = list(samples)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, idx: int) -> WindowSample:
        return self.items[idx]


def collate_windows(batch: List[WindowSample]) -> Dict[str, Any]:
    # windows are numpy views into the dataset; stacking copies them once per batch
    return {
        "history": np.stack([x.history for x in batch]),
        "target": np.stack([x.target for x in batch]),
        "t0": [x.t0 for x in batch],
    }


def window_loader(samples: Sequence[WindowSample], batch_size: int, shuffle: bool, seed: int = 0) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        WindowDataset(samples),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        collate_fn=collate_windows,
    )
