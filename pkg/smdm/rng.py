"""
난수 스트림

하나의 루트 시드에서 카운터 기반 Philox 생성기를 용도별로 분기합니다.
스트림끼리는 독립이라 한쪽의 소비량이 다른 쪽 결과를 바꾸지 않습니다.
"""

import numpy as np

STREAMS = {
    "data": 1,
    "mask": 2,
    "train": 3,
    "sample": 4,
    "eval": 5,
    "init": 6,
    "dropout": 7,
}


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """(seed, name, *keys)로 결정되는 독립 생성기를 반환합니다."""
    if name not in STREAMS:
        raise KeyError(f"Unknown random stream {name!r}, expected one of {sorted(STREAMS)}")
    seq = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *map(int, keys)))
    return np.random.Generator(np.random.Philox(seq))
