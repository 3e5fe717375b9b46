from __future__ import annotations

import json
import logging
import os
import time
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

META_KEYS = ("plan_hash", "n_samples", "batch_size")


class McCheckpoint:
    """蒙特卡洛运行的断点文件，中断后可以继续运行。

    格式: ``{"meta": {...}, "batches": {"<index>": [values...]}}``。meta 不一致
    （计划、样本数或批大小不同）时文件会被重置。
    """

    def __init__(self, cache_path: str):
        self.cache_path = cache_path
        self.data: Dict[str, Any] = {"meta": {}, "batches": {}}
        self._loaded = False

    def load(self):
        if self._loaded:
            return
        if os.path.exists(self.cache_path):
            try:
                with open(self.cache_path, "r", encoding="utf-8") as f:
                    self.data = json.load(f)
                logger.info(f"已加载蒙特卡洛断点文件: {self.cache_path}")
            except (OSError, ValueError) as e:
                logger.warning(f"读取断点文件失败，重新开始: {e}")
                self.data = {"meta": {}, "batches": {}}
        self._loaded = True

    def initialize(self, meta: dict):
        self.load()
        existing_meta = self.data.get("meta") or {}
        if not existing_meta:
            self.data = {"meta": meta, "batches": {}}
            self.save()
            return
        if any(existing_meta.get(key) != meta.get(key) for key in META_KEYS):
            logger.warning("断点文件属于其他运行计划，已重置")
            self.data = {"meta": meta, "batches": {}}
            self.save()

    def save(self):
        os.makedirs(os.path.dirname(self.cache_path) or ".", exist_ok=True)
        tmp_path = f"{self.cache_path}.tmp"
        self.data["meta"]["updated_at"] = time.time()
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=2)
        os.replace(tmp_path, self.cache_path)

    def completed(self, batch_index: int) -> Optional[List[float]]:
        values = self.data.get("batches", {}).get(str(batch_index))
        return None if values is None else [float(v) for v in values]

    def record_batch(self, batch_index: int, values: List[float]):
        self.data.setdefault("batches", {})[str(batch_index)] = [float(v) for v in values]
        self.save()

    def clear(self):
        self.data = {"meta": {}, "batches": {}}
        for path in (self.cache_path, f"{self.cache_path}.tmp"):
            if os.path.exists(path):
                os.remove(path)
        logger.info(f"已删除断点文件: {self.cache_path}")
