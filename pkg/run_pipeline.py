# -*- coding: utf-8 -*-
"""
实验室入口：construct（几何 -> 映射 -> 输运）、verify（各层校验套件）、sweep（Lyapunov/轨道/场截面）。
配置为单个 JSON（--config），--print-defaults 打印全部默认值。
退出码：0 通过，1 校验失败，2 配置错误，3 数值失败。
construct 可选 --clean 先清理输出目录；verify 先核对 construct 产物清单再在进程内重建构造对象。
"""
import argparse
import logging
import os
import shutil
import sys
from typing import List, Optional

from lab_config import SUITES, SWEEP_KINDS, RunConfig, defaults_json, load_config
from lab_errors import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_VERIFY_FAILED, LabError, exit_code_for

logger = logging.getLogger(__name__)


def clean_output(out_dir: str):
    """清理输出目录，便于从头重算。"""
    if os.path.isdir(out_dir):
        shutil.rmtree(out_dir)
        print(f"  已清理: {out_dir}/")
    else:
        print(f"  跳过(不存在): {out_dir}/")


def run_pipeline(cfg: RunConfig, command: str, suite: str = "all", kind: str = "lyapunov",
                 do_clean: bool = False) -> int:
    if command == "construct":
        if do_clean:
            print("--- 清理输出目录 ---")
            clean_output(cfg.out_dir)
            print()
        from run_construct import run as run_construct
        run_construct(cfg)
        print("construct 执行完毕。")
        return EXIT_OK

    if command == "verify":
        from run_verify import run as run_verify
        passed = run_verify(cfg, suite)
        print("校验通过。" if passed else "校验未通过。")
        return EXIT_OK if passed else EXIT_VERIFY_FAILED

    from run_sweep import run as run_sweep
    run_sweep(cfg, kind)
    print("sweep 执行完毕。")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON 配置文件路径，未给出的字段取默认值")
    common.add_argument("--out", help="输出目录（覆盖 out_dir）")
    common.add_argument("--seed", type=int, help="随机种子（覆盖 seed）")
    common.add_argument("-v", "--verbose", action="store_true", help="输出 INFO 级日志")

    parser = argparse.ArgumentParser(description="本质共存构造实验室：construct -> verify -> sweep。")
    parser.add_argument("--print-defaults", action="store_true", help="打印默认配置 JSON 后退出")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("construct", parents=[common], help="构造几何、显式映射与测度输运并写出报告")
    p.add_argument("--clean", action="store_true", help="先清理输出目录")

    p = sub.add_parser("verify", parents=[common], help="运行校验套件")
    p.add_argument("--suite", choices=SUITES, default="all", help="套件名（默认 all）")

    p = sub.add_parser("sweep", parents=[common], help="扫描 Lyapunov 指数、轨道或场截面")
    p.add_argument("--kind", choices=SWEEP_KINDS, default="lyapunov", help="扫描类型（默认 lyapunov）")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.print_defaults:
        print(defaults_json())
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG_ERROR

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    try:
        cfg = load_config(args.config, overrides)
        return run_pipeline(cfg, args.command, suite=getattr(args, "suite", "all"),
                            kind=getattr(args, "kind", "lyapunov"), do_clean=getattr(args, "clean", False))
    except (LabError, ArithmeticError, ValueError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"错误: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
