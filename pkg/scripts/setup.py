#!/usr/bin/env python3
"""
项目设置脚本

安装 st-instruct（可选带开发依赖），准备 .env 与运行目录，
并可按运行配置预先生成一份合成语料，供 train / eval 直接使用。

作者：ST-Instruct
版本：0.1.0
"""

import argparse
import os
import shutil
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def install_package(dev: bool) -> bool:
    """以可编辑模式安装项目"""
    target = ".[dev]" if dev else "."
    print(f"📦 安装 st-instruct{'（含 pytest / hypothesis）' if dev else ''}...")
    try:
        subprocess.run([sys.executable, "-m", "pip", "install", "-e", target], check=True, cwd=ROOT)
        print(f"✅ 安装成功: {target}")
        return True
    except subprocess.CalledProcessError:
        print(f"❌ 安装失败: {target}")
        return False


def prepare_workspace() -> None:
    """准备 .env 与 logs/ runs/ 目录"""
    print("⚙️ 准备工作目录...")
    env_file, example = ROOT / ".env", ROOT / "configs" / ".env.example"
    if not env_file.exists():
        if example.exists():
            shutil.copy(example, env_file)
            print("✅ 由 configs/.env.example 创建 .env")
        else:
            print("⚠️  未找到 configs/.env.example，使用内置运行时默认值")
    for directory in ("logs", "runs"):
        (ROOT / directory).mkdir(exist_ok=True)
    print("✅ logs/ runs/ 已就绪")


def bootstrap_data(config: Path, out: Path) -> bool:
    """调用 st-instruct synth 生成合成语料与默认切分"""
    if (out / "manifest.json").exists():
        print(f"⏭️  {out} 已有合成语料，跳过生成")
        return True
    print(f"🧪 按 {config} 生成合成语料到 {out} ...")
    command = [sys.executable, "-m", "st_instruct", "synth", "--config", str(config), "--out", str(out)]
    env = dict(os.environ)
    env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(ROOT / "core" / "src"), env.get("PYTHONPATH")]))
    result = subprocess.run(command, cwd=ROOT, env=env)
    if result.returncode != 0:
        print(f"❌ 合成语料生成失败（退出码 {result.returncode}）")
        return False
    print(f"✅ 合成语料已写入 {out}")
    return True


def main() -> int:
    parser = argparse.ArgumentParser(description="st-instruct 项目设置")
    parser.add_argument("--dev", action="store_true", help="同时安装开发依赖")
    parser.add_argument("--skip-install", action="store_true", help="跳过 pip 安装")
    parser.add_argument("--synth", type=Path, metavar="CONFIG", help="按运行配置预生成合成语料")
    parser.add_argument("--data-dir", type=Path, default=ROOT / "runs" / "data", help="合成语料输出目录")
    args = parser.parse_args()

    print("🚀 开始项目设置...")
    if not args.skip_install and not install_package(args.dev):
        return 1
    prepare_workspace()
    if args.synth is not None and not bootstrap_data(args.synth, args.data_dir):
        return 1
    print("🎉 项目设置完成!")
    return 0


if __name__ == "__main__":
    sys.exit(main())
