# -*- coding: utf-8 -*-
"""
校验层：读取 construct 产物清单，运行指定套件，写出 Markdown 报告、逐项检查表与 JSON 汇总。
返回是否全部通过；未通过时 run_pipeline 以退出码 1 结束。
"""
import logging
import os
from typing import Optional

from lab_config import RunConfig
from run_construct import LabContext, check_manifest, write_csv, write_json
from verify_report import build_report, failed_checks, run_suites, summarize_by_suite, summary_json

logger = logging.getLogger(__name__)

REPORT_FILE = "verify_report.md"
CHECKS_FILE = "checks.csv"
SUMMARY_FILE = "verify_summary.json"


def run(cfg: RunConfig, suite: str = "all", out_dir: Optional[str] = None,
        lab: Optional[LabContext] = None) -> bool:
    out_dir = out_dir or cfg.out_dir
    check_manifest(cfg, out_dir)
    lab = lab or LabContext(cfg)

    print(f"--- 校验套件 {suite} ---")
    df = run_suites(lab, suite)

    report_path = os.path.join(out_dir, REPORT_FILE)
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(build_report(df))
    print(f"已写入 {report_path}")
    write_csv(df, out_dir, CHECKS_FILE)
    summary = summary_json(df)
    summary["suite"] = suite
    write_json(summary, out_dir, SUMMARY_FILE)

    print(summarize_by_suite(df).to_string(index=False))
    failed = failed_checks(df)
    if not failed.empty:
        print("未通过的检查:")
        print(failed.to_string(index=False))
        logger.warning("套件 %s 有 %d 项未通过", suite, len(failed))
    return bool(summary["passed"])


if __name__ == "__main__":
    from lab_config import load_config
    run(load_config())
