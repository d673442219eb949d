"""
命令行入口

单一可执行程序 st-instruct，子命令：
    ingest              出行记录 CSV → .stt 张量
    synth               按配置生成合成语料（含切分与第二座城市）
    build-instructions  .stt + 切分 → .stjsonl 指令语料
    train               指令微调并保存检查点
    eval                按协议评估检查点，输出 JSON/CSV 报告
    ablate              同种子同预算训练 FULL 与变体并输出对比表
    predict             对单个结构化提示生成答案与数值预测

退出码：0 成功；1 用法/配置错误；2 数据错误；3 数值异常。
所有诊断信息写到标准错误；每个输出目录都写入 manifest.json。

作者：ST-Instruct
版本：0.1.0
"""

import argparse
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .checkpoint import checkpoint_load, restore_model
from .config import ABLATION_VARIANTS, PROTOCOLS, RunConfig, get_settings
from .evaluation import evaluate_protocol, run_ablation, save_report
from .exceptions import DataException, ErrorCode, STInstructException, handle_exceptions
from .prompts import PromptRequest, build_split_corpus, render_answer, render_list, save_corpus
from .st_data import (
    DatasetSplit,
    GridConfig,
    SpatioTemporalTensor,
    TimeMeta,
    attach_poi,
    build_cross_city,
    build_synthetic_corpus,
    cross_city_split,
    default_split,
    ingest_trips,
    load_poi_sidecar,
    load_tensor,
    save_tensor,
)
from .training import run_training, variant_options

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)

CROSS_CITY_DIR = "cross_city"
SPLIT_SUFFIX = ".split.json"


class ArgumentParser(argparse.ArgumentParser):
    """用法错误以退出码 1 结束"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: 错误: {message}\n")


def setup_logging(level: Optional[str] = None) -> None:
    settings = get_settings()
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.LOG_FILE:
        handlers.append(logging.FileHandler(settings.LOG_FILE, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper()),
        format=settings.LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


# ==================== 清单 ====================

def write_manifest(out_dir: Path, command: str, config: Optional[RunConfig], seed: Optional[int],
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    """写出复现清单（不含时间戳）"""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": seed,
        "config_fingerprint": config.fingerprint() if config else None,
        "config": config.model_dump(mode="json") if config else None,
        "versions": {
            "st_instruct": __version__,
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
    return path


# ==================== 数据加载 ====================

def _load_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    config = RunConfig.from_file(path) if path else RunConfig()
    return config.with_overrides(overrides) if overrides else config


def load_datasets(config: RunConfig, data_dir: Optional[str], cross_city: bool = False
                  ) -> Tuple[Dict[str, SpatioTemporalTensor], Dict[str, DatasetSplit]]:
    """
    读取数据目录中的 <name>.stt 与 <name>.split.json；未给出目录时按配置现场生成

    缺少切分文件时使用配置中的默认切分。
    """
    root: Optional[Path] = None
    if data_dir is None:
        tensors = build_cross_city(config.data) if cross_city else build_synthetic_corpus(config.data)
    else:
        root = Path(data_dir) / CROSS_CITY_DIR if cross_city else Path(data_dir)
        tensors = {}
        for name in config.data.datasets:
            path = root / f"{name}.stt"
            if path.exists():
                tensors[name] = load_tensor(path)
        if not tensors:
            raise DataException(f"数据目录中没有可用的 .stt 文件: {root}", details={"datasets": config.data.datasets})

    splits = {}
    for name, tensor in tensors.items():
        split_path = root / f"{name}{SPLIT_SUFFIX}" if root is not None else None
        if split_path is not None and split_path.exists():
            splits[name] = DatasetSplit.load(split_path)
        elif cross_city:
            splits[name] = cross_city_split(tensor, config.data)
        else:
            splits[name] = default_split(tensor, config.data)
    return tensors, splits


def _seed_overrides(seed: Optional[int]) -> Dict[str, Any]:
    return {"train": {"seed": seed}, "eval": {"seed": seed}} if seed is not None else {}


# ==================== 子命令 ====================

@handle_exceptions()
def cmd_ingest(args) -> int:
    grid = GridConfig.from_file(args.grid)
    interval = args.interval or grid.interval_minutes
    steps = (args.days * 24 * 60) // interval
    time = TimeMeta(start=args.start, interval_minutes=interval, steps=steps)
    tensor = ingest_trips(args.trips, grid, time, city=args.city, name=args.name, chunk_size=args.chunk_size)
    if args.poi:
        attach_poi(tensor, load_poi_sidecar(args.poi))
    out = Path(args.out)
    save_tensor(tensor, out)
    write_manifest(out.parent, "ingest", None, None, {
        "inputs": {"trips": str(args.trips), "grid": str(args.grid), "poi": args.poi},
        "shape": list(tensor.values.shape),
        "skipped": {"pickups": tensor.attrs["skipped_pickups"], "dropoffs": tensor.attrs["skipped_dropoffs"]},
    })
    return 0


@handle_exceptions()
def cmd_synth(args) -> int:
    config = _load_config(args.config, {"data": {"seed": args.seed}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for cross_city, root in ((False, out), (True, out / CROSS_CITY_DIR)):
        tensors, splits = load_datasets(config, None, cross_city=cross_city)
        for name, tensor in tensors.items():
            save_tensor(tensor, root / f"{name}.stt")
            splits[name].save(root / f"{name}{SPLIT_SUFFIX}")
            written.append(str((root / f"{name}.stt").relative_to(out)))
    write_manifest(out, "synth", config, config.data.seed, {"files": written})
    logger.info(f"✅ 合成语料已写出: {out} ({len(written)} 个张量)")
    return 0


@handle_exceptions()
def cmd_build_instructions(args) -> int:
    config = _load_config(args.config, {"train": {"variant": args.variant}})
    tensor = load_tensor(args.tensor)
    split = DatasetSplit.load(args.split) if args.split else default_split(tensor, config.data)
    split.check_disjoint()
    mode, with_context = variant_options(config.train.variant)
    data = config.data
    stride = data.train_stride if args.which == "train" else data.eval_stride
    limit = data.max_train_records_per_dataset if args.which == "train" else data.max_eval_records_per_dataset
    records = build_split_corpus(
        {tensor.name: tensor}, split, args.which, data.history_length, data.prediction_length, stride,
        mode=mode, with_context=with_context, max_records=None if args.all_records else limit,
        seed=data.split_seed, threads=args.threads,
    )
    out = Path(args.out)
    save_corpus(records, out)
    write_manifest(out.parent, "build-instructions", config, data.split_seed, {
        "records": len(records), "which": args.which, "split_fingerprint": split.fingerprint(),
    })
    return 0


@handle_exceptions()
def cmd_train(args) -> int:
    overrides = _seed_overrides(args.seed)
    if args.variant:
        overrides.setdefault("train", {})["variant"] = args.variant
    config = _load_config(args.config, overrides)
    seed = config.require_seed("train")
    tensors, splits = load_datasets(config, args.data)
    out = Path(args.out)
    result = run_training(config, tensors, splits, out_dir=out, threads=args.threads, epochs=args.epochs)
    history = [b.to_dict() for b in result.history]
    pd.DataFrame(history).to_csv(out / "losses.csv", index_label="epoch")
    write_manifest(out, "train", config, seed, {
        "split_fingerprints": {n: s.fingerprint() for n, s in splits.items()},
        "steps": result.trainer.step,
        "final_loss": history[-1] if history else None,
        "pretrain_losses": result.pretrain_losses,
    })
    return 0


@handle_exceptions()
def cmd_eval(args) -> int:
    checkpoint = checkpoint_load(args.ckpt)
    config = checkpoint.config.with_overrides({"eval": {"seed": args.seed, "threads": args.threads}})
    seed = config.require_seed("eval")
    model = restore_model(checkpoint)
    model.config = config
    tensors, splits = load_datasets(config, args.data, cross_city=args.protocol == "cross-city")
    report = evaluate_protocol(model, tensors, splits, args.protocol,
                               baselines=not args.no_baselines, seed=seed, threads=args.threads)
    out = Path(args.out)
    save_report(report, out)
    write_manifest(out, "eval", config, seed, {
        "protocol": args.protocol,
        "checkpoint": str(args.ckpt),
        "checkpoint_step": checkpoint.step,
        "split_fingerprints": report.split_fingerprints,
    })
    return 0


@handle_exceptions()
def cmd_ablate(args) -> int:
    config = _load_config(args.config, _seed_overrides(args.seed))
    config.require_seed("train")
    seed = config.require_seed("eval")
    tensors, splits = load_datasets(config, args.data)
    cross = load_datasets(config, args.data, cross_city=True) if "cross-city" in config.eval.protocols else None
    out = Path(args.out) if args.out else None
    result = run_ablation(args.variant, config, tensors, splits, cross_city=cross, out_dir=out,
                          threads=args.threads, epochs=args.epochs)
    if out is not None:
        write_manifest(out, "ablate", config, seed, {"variant": args.variant})
    else:
        sys.stderr.write(result.comparison.to_string(index=False) + "\n")
    return 0


@handle_exceptions()
def cmd_predict(args) -> int:
    checkpoint = checkpoint_load(args.ckpt)
    model = restore_model(checkpoint)
    try:
        payload = json.loads(Path(args.prompt_json).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise DataException(f"提示文件读取失败: {args.prompt_json}", cause=e)
    payload = {k: v for k, v in payload.items() if not str(k).startswith("_")}
    request = PromptRequest(**payload)
    mode, with_context = variant_options(model.config.train.variant)
    record = request.to_record(mode=mode, with_context=with_context)
    prediction = model.predict(record, max_new_tokens=args.max_new_tokens)

    result: Dict[str, Any] = {
        "prompt": record.prompt_text,
        "raw_answer": prediction.answer_text,
        "missing_pre": prediction.missing_pre,
        "parse_failed": prediction.parse_failed,
        "predictions": None,
    }
    if prediction.values is not None:
        per_feature = [np.rint(prediction.values[:, f]).astype(int).tolist() for f in range(record.num_features)]
        if record.task_kind == "classification":
            per_feature = [(prediction.values[:, f] >= 0.5).astype(int).tolist() for f in range(record.num_features)]
        result["predictions"] = dict(zip(record.feature_names, per_feature))
        result["answer"] = render_answer(prediction.answer_text, per_feature)
        for name, values in result["predictions"].items():
            logger.info(f"📊 {name}: {render_list(values)}")
    sys.stdout.write(json.dumps(result, ensure_ascii=False, indent=2) + "\n")
    return 0


# ==================== 参数解析 ====================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="语料构建与评估的最大工作线程数（默认取 ST_INSTRUCT_THREADS）")
    common.add_argument("--log-level", default=None, help="日志级别（默认取 ST_INSTRUCT_LOG_LEVEL）")

    parser = ArgumentParser(prog="st-instruct", description="时空指令微调：数据、训练、评估与预测")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=ArgumentParser)

    p = sub.add_parser("ingest", parents=[common], help="出行记录 CSV 聚合为 .stt 张量")
    p.add_argument("--trips", required=True, help="出行记录 CSV（timestamp,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon）")
    p.add_argument("--grid", required=True, help="网格配置 JSON")
    p.add_argument("--out", required=True, help="输出 .stt 文件")
    p.add_argument("--start", required=True, help="UTC 起始时间（ISO-8601）")
    p.add_argument("--days", type=int, required=True, help="覆盖的天数")
    p.add_argument("--interval", type=int, default=None, help="采样间隔（分钟，默认取网格配置）")
    p.add_argument("--poi", default=None, help="POI 旁路 JSON（可选）")
    p.add_argument("--city", default="New York City", help="城市名称")
    p.add_argument("--name", default="taxi", help="数据集名称")
    p.add_argument("--chunk-size", type=int, default=100_000, help="CSV 分块行数")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="生成合成语料、默认切分与第二座城市")
    p.add_argument("--config", default=None, help="运行配置 JSON（缺省使用内置默认值）")
    p.add_argument("--out", required=True, help="输出目录")
    p.add_argument("--seed", type=int, default=None, help="覆盖 data.seed")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("build-instructions", parents=[common], help="由张量与切分构建 .stjsonl 指令语料")
    p.add_argument("--tensor", required=True, help=".stt 张量文件")
    p.add_argument("--split", default=None, help="切分 JSON（缺省按配置默认切分）")
    p.add_argument("--out", required=True, help="输出 .stjsonl 文件")
    p.add_argument("--config", default=None, help="运行配置 JSON")
    p.add_argument("--which", choices=["train", "supervised", "zero-shot", "all"], default="train",
                   help="区域与时间段组合")
    p.add_argument("--variant", choices=ABLATION_VARIANTS, default=None, help="消融变体（影响提示词与目标格式）")
    p.add_argument("--all-records", action="store_true", help="不做抽样，输出全部窗口")
    p.set_defaults(handler=cmd_build_instructions)

    p = sub.add_parser("train", parents=[common], help="指令微调并保存检查点")
    p.add_argument("--config", required=True, help="运行配置 JSON")
    p.add_argument("--out", required=True, help="检查点输出目录")
    p.add_argument("--data", default=None, help="synth 输出目录（缺省按配置现场生成）")
    p.add_argument("--seed", type=int, default=None, help="覆盖 train.seed 与 eval.seed")
    p.add_argument("--epochs", type=int, default=None, help="覆盖 train.epochs")
    p.add_argument("--variant", choices=ABLATION_VARIANTS, default=None, help="覆盖 train.variant")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="按协议评估检查点")
    p.add_argument("--ckpt", required=True, help="检查点文件或目录")
    p.add_argument("--protocol", choices=PROTOCOLS, required=True, help="评估协议")
    p.add_argument("--out", required=True, help="报告输出目录")
    p.add_argument("--data", default=None, help="synth 输出目录（缺省按配置现场生成）")
    p.add_argument("--seed", type=int, default=None, help="覆盖 eval.seed")
    p.add_argument("--no-baselines", action="store_true", help="不评估朴素基线")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="训练并对比 FULL 与消融变体")
    p.add_argument("--variant", choices=[v for v in ABLATION_VARIANTS if v != "FULL"], required=True,
                   help="消融变体")
    p.add_argument("--config", required=True, help="运行配置 JSON")
    p.add_argument("--out", default=None, help="报告与对比表输出目录（缺省只打印对比表）")
    p.add_argument("--data", default=None, help="synth 输出目录（缺省按配置现场生成）")
    p.add_argument("--seed", type=int, default=None, help="覆盖 train.seed 与 eval.seed")
    p.add_argument("--epochs", type=int, default=None, help="覆盖 train.epochs")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("predict", parents=[common], help="对单个结构化提示生成答案与数值预测")
    p.add_argument("--ckpt", required=True, help="检查点文件或目录")
    p.add_argument("--prompt-json", required=True, help="结构化提示 JSON")
    p.add_argument("--max-new-tokens", type=int, default=None, help="最大生成长度（默认取 eval.max_new_tokens）")
    p.set_defaults(handler=cmd_predict)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "handler", None):
        parser.print_help(sys.stderr)
        return 1

    setup_logging(args.log_level)
    if args.threads is None:
        args.threads = get_settings().THREADS
    if args.threads < 1:
        logger.error("❌ --threads 必须为正整数")
        return 1

    try:
        return args.handler(args)
    except STInstructException as e:
        logger.error(f"❌ {args.command} 失败: {e}")
        if e.cause is not None and e.error_code == ErrorCode.UNKNOWN_ERROR:
            logger.debug("原始异常", exc_info=e.cause)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
