#!/usr/bin/env python3
"""
端到端流水线脚本
依次执行 synth → train → eval（零样本 / 有监督 / 跨城市）
"""

import argparse
import os
import subprocess
import sys


def get_project_root():
    """获取项目根目录"""
    return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def run_step(name, args):
    """以子进程运行一个 CLI 子命令，失败时返回其退出码"""
    cmd = [sys.executable, "-m", "st_instruct", *args]
    print(f"🚀 {name}: {' '.join(cmd)}")
    env = dict(os.environ)
    src = os.path.join(get_project_root(), "core", "src")
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    result = subprocess.run(cmd, env=env)
    if result.returncode != 0:
        print(f"❌ {name} 失败，退出码 {result.returncode}")
    else:
        print(f"✅ {name} 完成")
    return result.returncode


def main():
    parser = argparse.ArgumentParser(description="ST-Instruct 端到端流水线")
    parser.add_argument("--config", default="configs/default_run.json", help="运行配置 JSON")
    parser.add_argument("--workdir", default="runs/pipeline", help="输出目录")
    parser.add_argument("--seed", type=int, default=1, help="训练与评估种子")
    parser.add_argument("--epochs", type=int, default=None, help="覆盖 train.epochs")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    data_dir = os.path.join(args.workdir, "data")
    train_dir = os.path.join(args.workdir, "train")
    common = ["--threads", str(args.threads)]

    steps = [
        ("synth", ["synth", "--config", args.config, "--out", data_dir, *common]),
        ("train", ["train", "--config", args.config, "--data", data_dir, "--out", train_dir,
                   "--seed", str(args.seed), *common]
         + (["--epochs", str(args.epochs)] if args.epochs else [])),
    ]
    for protocol in ("zero-shot", "supervised", "cross-city"):
        steps.append((f"eval {protocol}", [
            "eval", "--ckpt", train_dir, "--protocol", protocol, "--data", data_dir,
            "--out", os.path.join(args.workdir, "eval", protocol), "--seed", str(args.seed), *common,
        ]))

    for name, step_args in steps:
        code = run_step(name, step_args)
        if code != 0:
            sys.exit(code)
    print(f"🎉 流水线完成，结果位于 {args.workdir}")


if __name__ == "__main__":
    main()
