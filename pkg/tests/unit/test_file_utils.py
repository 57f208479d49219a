"""file_utils 单元测试"""

import hashlib
import json

import numpy as np
import pandas as pd
import pytest

from config.config import settings
from utils.file_utils import (
    DRAWS_FILENAME,
    DRAWS_INDEX_FILENAME,
    derive_seed,
    ensure_dir,
    file_checksum,
    read_draws,
    write_csv,
    write_draws,
    write_json,
)


class TestFileChecksum:
    """file_checksum 函数测试类"""

    def test_checksum_matches_sha256_of_bytes(self, tmp_path):
        """测试校验和等于文件字节的 SHA-256"""
        path = tmp_path / "evidence.csv"
        path.write_bytes(b"study_id,indication\nS1,CRC\n")
        expected = hashlib.sha256(b"study_id,indication\nS1,CRC\n").hexdigest()
        assert file_checksum(path) == f"sha256:{expected}"

    def test_checksum_changes_with_content(self, tmp_path):
        """测试内容变化时校验和变化"""
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        first.write_text("x\n")
        second.write_text("y\n")
        assert file_checksum(first) != file_checksum(second)


class TestDeriveSeed:
    """derive_seed 函数测试类"""

    def test_same_keys_same_seed(self):
        assert derive_seed(12345, "replication", 3) == derive_seed(12345, "replication", 3)

    def test_keys_separate_streams(self):
        seeds = {derive_seed(12345, "replication", r) for r in range(100)}
        assert len(seeds) == 100
        assert derive_seed(12345, "crossval", "A1") != derive_seed(12346, "crossval", "A1")

    def test_fits_in_32_bits(self):
        assert 0 <= derive_seed(0, "x") < 2**32

    def test_first_four_digest_bytes(self):
        digest = hashlib.sha256(b"7|structure|CP").digest()
        assert derive_seed(7, "structure", "CP") == int.from_bytes(digest[:4], "little")


class TestWriters:
    """写文件函数测试类"""

    def test_ensure_dir_creates_nested_directory(self, tmp_path):
        """测试创建多级目录"""
        target = ensure_dir(tmp_path / "results" / "fit")
        assert target.is_dir()
        assert ensure_dir(target) == target

    def test_write_csv_float_format_and_line_endings(self, tmp_path, monkeypatch):
        """测试浮点格式与换行符"""
        monkeypatch.setattr(settings, "float_format", "%.3f")
        path = write_csv(pd.DataFrame({"quantity": ["d"], "mean": [1 / 3]}), tmp_path / "summary.csv")
        assert path.read_bytes() == b"quantity,mean\nd,0.333\n"

    def test_write_json_round_trips(self, tmp_path):
        payload = {"status": "ok", "flags": ["theta"], "dic": 12.5}
        path = write_json(payload, tmp_path / "fit.json")
        assert json.loads(path.read_text(encoding="utf-8")) == payload
        assert path.read_text(encoding="utf-8").endswith("}\n")


class TestDraws:
    """原始抽样导出测试类"""

    def chains(self):
        rng = np.random.default_rng(0)
        return [
            {"theta": rng.normal(size=(5, 1)), "tau": rng.uniform(size=(5, 2))},
            {"theta": rng.normal(size=(5, 1)), "tau": rng.uniform(size=(5, 2))},
        ]

    def test_layout_is_little_endian_float64_c_order(self, tmp_path):
        """测试 draws.bin 的字节布局"""
        chains = self.chains()
        write_draws(chains, tmp_path)

        raw = np.frombuffer((tmp_path / DRAWS_FILENAME).read_bytes(), dtype="<f8")
        expected = np.concatenate([values.ravel(order="C") for chain in chains for values in chain.values()])
        np.testing.assert_array_equal(raw, expected)

    def test_index_lists_offsets_and_shapes(self, tmp_path):
        write_draws(self.chains(), tmp_path)
        index = json.loads((tmp_path / DRAWS_INDEX_FILENAME).read_text(encoding="utf-8"))

        assert index["dtype"] == "<f8"
        assert index["total_bytes"] == 2 * (5 + 10) * 8
        assert [(b["chain"], b["name"], b["offset"], b["shape"]) for b in index["blocks"]] == [
            (0, "theta", 0, [5, 1]),
            (0, "tau", 40, [5, 2]),
            (1, "theta", 120, [5, 1]),
            (1, "tau", 160, [5, 2]),
        ]

    def test_read_back(self, tmp_path):
        chains = self.chains()
        write_draws(chains, tmp_path)
        loaded = read_draws(tmp_path)
        for original, restored in zip(chains, loaded):
            for name in original:
                np.testing.assert_array_equal(restored[name], original[name])

    def test_missing_index(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_draws(tmp_path)
