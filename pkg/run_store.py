#!/usr/bin/env python3
"""
运行产物存储
历史 (JSONL)、指标 (JSON)、优先级明细 (CSV)、运行元数据与有效配置；
时间戳只写入旁路日志 run.log，其余文件在相同配置与种子下逐字节一致
"""

import csv
import io
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

from errors import ConfigError
from trainer import MetricsReport, PriorityReport, RunHistory

HISTORY_NAME = "history.jsonl"
RUN_META_NAME = "run_meta.json"
EFFECTIVE_CONFIG_NAME = "config.effective.json"
CHECKPOINT_NAME = "model.hmp"
LOG_NAME = "run.log"
PRIORITY_ROWS_NAME = "priority_rows.csv"
ABLATION_SUMMARY_NAME = "ablation_summary.csv"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _dump_json(data, path: Path):
    # newline 固定为 \n，不受平台影响
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(rows: Sequence[Dict[str, object]], path: Path, columns: Optional[List[str]] = None):
    columns = columns or (list(rows[0].keys()) if rows else [])
    buffer = io.StringIO(newline="")
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k) for k in columns})
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buffer.getvalue())


class RunStore:
    """一个输出目录下的所有运行产物"""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"无法创建输出目录 {self.out_dir}: {e}")

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / CHECKPOINT_NAME

    @property
    def history_path(self) -> Path:
        return self.out_dir / HISTORY_NAME

    def write_history(self, history: RunHistory) -> Path:
        lines = history.to_lines()
        with open(self.history_path, "w", encoding="utf-8", newline="\n") as f:
            for line in lines:
                f.write(line + "\n")
        return self.history_path

    def read_history(self) -> List[Dict[str, object]]:
        with open(self.history_path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def write_metrics(self, report: MetricsReport, split: str) -> Path:
        path = self.out_dir / f"metrics_{split}.json"
        _dump_json(report.to_dict(), path)
        return path

    def write_priority(self, report: PriorityReport, split: str) -> List[Path]:
        """优先级汇总 JSON 与逐包 (p̂ urgent, p̂ other) 明细 CSV"""
        summary = self.out_dir / f"priority_{split}.json"
        _dump_json(report.to_dict(), summary)
        rows = self.out_dir / PRIORITY_ROWS_NAME
        columns = ["id", "urgent", "other", "p_urgent", "p_other", "predicted", "win"]
        _write_csv([{**r.__dict__, "win": int(r.win)} for r in report.rows], rows, columns)
        return [summary, rows]

    def write_run_meta(self, meta: Dict[str, object]) -> Path:
        path = self.out_dir / RUN_META_NAME
        _dump_json(meta, path)
        return path

    def write_effective_config(self, config: Dict[str, object]) -> Path:
        path = self.out_dir / EFFECTIVE_CONFIG_NAME
        _dump_json(config, path)
        return path

    def write_table(self, rows: Sequence[Dict[str, object]], name: str,
                    columns: Optional[List[str]] = None) -> Path:
        path = self.out_dir / name
        _write_csv(rows, path, columns)
        return path

    @contextmanager
    def sidecar_log(self, level: int = logging.INFO) -> Iterator[Path]:
        """在 with 块内把根日志写入 run.log（追加）"""
        path = self.out_dir / LOG_NAME
        handler = logging.FileHandler(path, encoding="utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler.setLevel(level)
        root = logging.getLogger()
        previous = root.level
        root.addHandler(handler)
        if root.level > level or root.level == logging.NOTSET:
            root.setLevel(level)
        try:
            yield path
        finally:
            root.removeHandler(handler)
            root.setLevel(previous)
            handler.close()
