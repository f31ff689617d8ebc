"""
脚本名称: SNR 实验助手 (snr_assistant.py)

功能描述:
    这是整个项目的交互层(门面)。
    负责解析命令行、加载 .env，并把所有实际工作委托给 `orchestrator.py`。
    所有可预期的错误在这里统一转换为 "❌ 错误：..." 提示和退出码：
        0 成功 / 1 契约或配置错误 / 2 数值失败（NaN、梯度检查未通过）/ 3 I/O 错误

使用方法:
    - 生成数据:  python snr_assistant.py gen-data --spec presets --out data/styleshapes --seed 0
    - 训练:      python snr_assistant.py train --config configs/default.json run.epochs=5 --protocol uda
    - 留一域:    python snr_assistant.py train --config configs/default.json --lodo
    - 评估:      python snr_assistant.py eval --checkpoint runs/snr/D-noisy/seed_0/checkpoint --dataset data/styleshapes/D-noisy
    - 梯度检查:  python snr_assistant.py grad-check --scope model --seeds 20
    - 导出:      python snr_assistant.py inspect --checkpoint ... --dataset ... --dump dumps/
    - 消融:      python snr_assistant.py ablate --config configs/default.json [--loss-ablation | --stages]

配置:
    - `SNR_NUM_THREADS`: 数据生成与分片评估的最大线程数（默认 1）
    - `SNR_DATA_ROOT`:   默认数据集根目录（默认 data/styleshapes）
    - `SNR_OUTPUT_ROOT`: 默认输出目录（默认 runs）
"""
import argparse
import sys

from dotenv import load_dotenv

from orchestrator import Orchestrator
from snr_core.errors import SnrError, SnrIOError
from train_process.grad_suite import SCOPES
from train_process.run_config import PRECISIONS, PROTOCOLS, load_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="风格归一化与还原 (SNR) 的桌面级实验工具：数据生成、训练、评估、梯度检查、导出与消融。",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="只输出错误信息，不打印进度。")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="生成 StyleShapes 多域数据集。",
                         formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    gen.add_argument("--spec", default="presets", help="'presets' 或 {域名: 风格参数} 形式的 JSON 文件。")
    gen.add_argument("--out", required=True, help="输出目录，每个域一个子目录。")
    gen.add_argument("--seed", type=int, default=0, help="根种子。")
    gen.add_argument("--n", type=int, default=2500, help="每个域的图像数（训练 + 测试）。")
    gen.add_argument("--num-classes", type=int, default=4, help="类别数 K（1..4）。")
    gen.add_argument("--force", action="store_true", help="允许写入已存在且非空的目录。")

    def add_config_args(p):
        p.add_argument("--config", default=None, help="JSON 配置文件路径；不给则使用默认配置。")
        p.add_argument("overrides", nargs="*", help="点分键覆盖，例如 run.epochs=5 model.variant=in_only。")
        p.add_argument("--out", default=None, help="输出目录（覆盖 run.output_dir）。")

    train = sub.add_parser("train", help="按配置训练（多种子）。",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_config_args(train)
    train.add_argument("--protocol", choices=PROTOCOLS, default=None, help="覆盖 run.protocol。")
    train.add_argument("--lodo", action="store_true", help="运行留一域协议（data.domains 中每个域轮流作为目标域）。")

    ev = sub.add_parser("eval", help="用检查点评估一个数据集。",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ev.add_argument("--checkpoint", required=True, help="检查点目录（含 checkpoint.snrt 与 checkpoint.json）。")
    ev.add_argument("--dataset", required=True, help="单个域的数据集目录。")
    ev.add_argument("--workers", type=int, default=0, help="分片评估的线程数，0 表示单线程。")
    ev.add_argument("--precision", choices=PRECISIONS, default="float32", help="评估精度。")
    ev.add_argument("--out", default=None, help="把评估结果写入该 JSON 文件。")

    gc = sub.add_parser("grad-check", help="中心差分梯度检查。",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    gc.add_argument("--scope", choices=SCOPES, default="model", help="检查范围；model 包含其余全部。")
    gc.add_argument("--seeds", type=int, default=20, help="种子个数。")

    ins = sub.add_parser("inspect", help="导出激活图与嵌入向量。",
                         formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ins.add_argument("--checkpoint", required=True, help="检查点目录。")
    ins.add_argument("--dataset", required=True, help="单个域的数据集目录。")
    ins.add_argument("--dump", required=True, help="导出目录。")
    ins.add_argument("--images", type=int, nargs="*", default=None, help="要导出的图像序号；不给则取前 --limit 张。")
    ins.add_argument("--limit", type=int, default=16, help="未指定 --images 时导出的图像数。")

    ab = sub.add_parser("ablate", help="消融实验：四个变体 / 损失形式 / 插入阶段。",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_config_args(ab)
    mode = ab.add_mutually_exclusive_group()
    mode.add_argument("--loss-ablation", action="store_true", help="比较 dual / plus_only / minus_only / no_compare。")
    mode.add_argument("--stages", action="store_true", help="比较 SNR 只插在单个阶段与插在全部阶段。")
    return parser


def _load_experiment(args):
    overrides = list(args.overrides)
    if getattr(args, "protocol", None):
        overrides.append(f"run.protocol={args.protocol}")
    if args.out:
        overrides.append(f"run.output_dir={args.out}")
    return load_config(args.config, overrides)


def run_command(args) -> None:
    orchestrator = Orchestrator(verbose=not args.quiet)
    if args.command == "gen-data":
        orchestrator.generate_data(args.spec, args.out, args.seed, args.n, args.num_classes, force=args.force)
    elif args.command == "train":
        orchestrator.train(_load_experiment(args), lodo=args.lodo)
    elif args.command == "eval":
        orchestrator.evaluate(args.checkpoint, args.dataset, workers=args.workers,
                              precision=args.precision, out=args.out)
    elif args.command == "grad-check":
        orchestrator.grad_check(args.scope, args.seeds)
    elif args.command == "inspect":
        orchestrator.inspect(args.checkpoint, args.dataset, args.dump, images=args.images, limit=args.limit)
    elif args.command == "ablate":
        mode = "loss_terms" if args.loss_ablation else "stages" if args.stages else "variants"
        orchestrator.ablate(_load_experiment(args), mode=mode)


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        run_command(args)
    except SnrError as e:
        print(f"❌ 错误：{e}")
        return e.exit_code
    except OSError as e:
        print(f"❌ 文件读写失败：{e}")
        return SnrIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
