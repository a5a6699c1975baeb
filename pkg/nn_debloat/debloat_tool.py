import argparse
import io
import logging
import os
import sys

import pluggy

from nn_debloat import DESCRIPTION, VERSION, hookspecs
from nn_debloat.config_parser import Command, ParserError, get_config
from nn_debloat.datasets import (
    DatasetError,
    find_idx_files,
    load_csv,
    load_idx,
    synthetic_dataset,
)
from nn_debloat.evaluation import (
    EvaluationError,
    FgsmConfig,
    PruneReport,
    accuracy,
    robustness,
    size_report,
)
from nn_debloat.intervals import Interval, NumericError
from nn_debloat.model import ModelError
from nn_debloat.model_io import ModelFormatError, load_model, save_model
from nn_debloat.pruning.sampling import Strategy
from nn_debloat.pruning.scheduler import PruneConfig, iter_schedule
from nn_debloat.pruning.surgery import SurgeryError
from nn_debloat.report_generator import (
    CsvReportGenerator,
    InspectReportGenerator,
    JsonReportGenerator,
    MarkdownReportGenerator,
    PruneFailure,
    StringReportGenerator,
)
from nn_debloat.tensor_core import DimensionError, UnsupportedLossError
from nn_debloat.trainer import ArchSpec, ArchSpecError, TrainingError, train_fixture

INSPECT_HELP = "Print the layer table of a model"
TRAIN_HELP = "Train a small fixture model"
PRUNE_HELP = "Prune a model progressively and record each epoch"
EVAL_HELP = "Measure accuracy, robustness and size of a model"
MODEL_HELP = "Model file (PDM format)"
OUTPUT_HELP = "Where to write the resulting model"
TARGET_HELP = "Fraction of each eligible layer to remove in total (default 0.5)"
STEP_HELP = "Fraction of each eligible layer to remove per epoch (default 0.05)"
STRATEGY_HELP = "Ranking of dense pair candidates (default joint)"
SEED_HELP = "Seed for random ranking and training (default 0)"
INPUT_LOW_HELP = "Lower end of the input box (default 0)"
INPUT_HIGH_HELP = "Upper end of the input box (default 1)"
DATASET_HELP = "Dataset loader: idx, csv, synthetic or a plugin name"
DATA_DIR_HELP = "Directory holding the IDX files"
DATA_FILE_HELP = "CSV file"
LABEL_COLUMN_HELP = "CSV column holding the labels (default 'label')"
NORMALIZE_HELP = "Min-max scale CSV feature columns to [0, 1]"
SPLIT_HELP = "Dataset split to use (default: train for train, test otherwise)"
SAMPLES_HELP = "Number of synthetic samples (default 1000)"
CLASSES_HELP = "Number of classes (default: inferred from the model or labels)"
DATA_SEED_HELP = "Seed of the synthetic data (default 0)"
LIMIT_HELP = "Only use the first N samples"
FGSM_EPS_HELP = "FGSM step size; enables robustness on any dataset (default 0.1)"
FORCE_ROBUSTNESS_HELP = "Measure robustness on non-image datasets too"
REPORT_HELP = "CSV report output"
JSON_REPORT_HELP = "JSON report output"
MARKDOWN_REPORT_HELP = "Markdown summary output"
ARCH_HELP = "Architecture, e.g. mlp:32,32 or cnn:8,16/32"
EPOCHS_HELP = "Training epochs (default 20)"
LEARNING_RATE_HELP = "Training learning rate (default 0.1)"
BATCH_SIZE_HELP = "Training batch size (default 32)"
QUIET_HELP = "Only print errors and failures"
VERBOSE_HELP = "Also print surgery and training progress"
CONFIG_FILE_HELP = "The configuration file to use"

DEFAULTS = {
    "target": 0.5,
    "step": 0.05,
    "strategy": Strategy.JOINT.value,
    "seed": 0,
    "input_low": 0.0,
    "input_high": 1.0,
    "label_column": "label",
    "normalize": False,
    "samples": 1000,
    "data_seed": 0,
    "force_robustness": False,
    "epochs": 20,
    "learning_rate": 0.1,
    "batch_size": 32,
    "quiet": False,
    "verbose": False,
}

DEFAULT_EPSILON = 0.1

# exit 2: the invocation or an input file is unusable
USAGE_ERRORS = (ParserError, ModelFormatError, DatasetError, ArchSpecError)
RUNTIME_ERRORS = (
    SurgeryError,
    NumericError,
    EvaluationError,
    TrainingError,
    ModelError,
    DimensionError,
    UnsupportedLossError,
    OSError,
)

LOGGER = logging.getLogger(__name__)


class UsageError(Exception):
    """
    Command line flags are missing or inconsistent.
    """


def _add_dataset_args(parser):
    parser.add_argument("--dataset", metavar="NAME", type=str, help=DATASET_HELP)
    parser.add_argument("--data-dir", metavar="DIRECTORY", type=str, help=DATA_DIR_HELP)
    parser.add_argument(
        "--data-file", metavar="FILENAME", type=str, help=DATA_FILE_HELP
    )
    parser.add_argument(
        "--label-column", metavar="NAME", type=str, help=LABEL_COLUMN_HELP
    )
    parser.add_argument(
        "--normalize", action="store_true", default=None, help=NORMALIZE_HELP
    )
    parser.add_argument("--split", choices=["train", "test"], help=SPLIT_HELP)
    parser.add_argument("--samples", metavar="N", type=int, help=SAMPLES_HELP)
    parser.add_argument("--classes", metavar="K", type=int, help=CLASSES_HELP)
    parser.add_argument("--data-seed", metavar="SEED", type=int, help=DATA_SEED_HELP)
    parser.add_argument("--limit", metavar="N", type=int, help=LIMIT_HELP)


def _add_evaluation_args(parser):
    parser.add_argument("--fgsm-eps", metavar="EPSILON", type=float, help=FGSM_EPS_HELP)
    parser.add_argument(
        "--force-robustness",
        action="store_true",
        default=None,
        help=FORCE_ROBUSTNESS_HELP,
    )
    parser.add_argument("--input-low", metavar="VALUE", type=float, help=INPUT_LOW_HELP)
    parser.add_argument(
        "--input-high", metavar="VALUE", type=float, help=INPUT_HIGH_HELP
    )
    parser.add_argument("--report", metavar="FILENAME", type=str, help=REPORT_HELP)
    parser.add_argument(
        "--json-report", metavar="FILENAME", type=str, help=JSON_REPORT_HELP
    )


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-q", "--quiet", action="store_true", default=None, help=QUIET_HELP
    )
    common.add_argument(
        "-v", "--verbose", action="store_true", default=None, help=VERBOSE_HELP
    )
    common.add_argument(
        "-c", "--config-file", help=CONFIG_FILE_HELP, metavar="CONFIG_FILE"
    )

    parser = argparse.ArgumentParser(prog="nn-debloat", description=DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"nn-debloat {VERSION}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    inspect = subparsers.add_parser(
        Command.INSPECT.value, parents=[common], help=INSPECT_HELP
    )
    inspect.add_argument("model", type=str, help=MODEL_HELP)

    train = subparsers.add_parser(
        Command.TRAIN.value, parents=[common], help=TRAIN_HELP
    )
    train.add_argument(
        "--arch", metavar="ARCH", type=str, required=True, help=ARCH_HELP
    )
    train.add_argument(
        "-o",
        "--output",
        metavar="FILENAME",
        type=str,
        required=True,
        help=OUTPUT_HELP,
    )
    train.add_argument("--epochs", metavar="N", type=int, help=EPOCHS_HELP)
    train.add_argument(
        "--learning-rate", metavar="RATE", type=float, help=LEARNING_RATE_HELP
    )
    train.add_argument("--batch-size", metavar="N", type=int, help=BATCH_SIZE_HELP)
    train.add_argument("--seed", metavar="SEED", type=int, help=SEED_HELP)
    _add_dataset_args(train)

    prune = subparsers.add_parser(
        Command.PRUNE.value, parents=[common], help=PRUNE_HELP
    )
    prune.add_argument("model", type=str, help=MODEL_HELP)
    prune.add_argument("-o", "--output", metavar="FILENAME", type=str, help=OUTPUT_HELP)
    prune.add_argument("--target", metavar="FRACTION", type=float, help=TARGET_HELP)
    prune.add_argument("--step", metavar="FRACTION", type=float, help=STEP_HELP)
    prune.add_argument(
        "--strategy",
        choices=[strategy.value for strategy in Strategy],
        help=STRATEGY_HELP,
    )
    prune.add_argument("--seed", metavar="SEED", type=int, help=SEED_HELP)
    prune.add_argument(
        "--markdown-report", metavar="FILENAME", type=str, help=MARKDOWN_REPORT_HELP
    )
    _add_dataset_args(prune)
    _add_evaluation_args(prune)

    evaluate = subparsers.add_parser(
        Command.EVAL.value, parents=[common], help=EVAL_HELP
    )
    evaluate.add_argument("model", type=str, help=MODEL_HELP)
    _add_dataset_args(evaluate)
    _add_evaluation_args(evaluate)
    return parser


def parse_args(argv):
    """
    Parse command line arguments merged with the configuration file,
    returning a dict of options keyed by their ``dest`` names.
    """
    return get_config(parser=build_parser(), argv=argv, defaults=DEFAULTS)


def _plugin_manager():
    plugin_manager = pluggy.PluginManager("nn_debloat")
    plugin_manager.add_hookspecs(hookspecs)
    plugin_manager.load_setuptools_entrypoints("nn_debloat")
    return plugin_manager


def _require(arg_dict, key, flag, dataset):
    if not arg_dict.get(key):
        raise UsageError(f"--dataset {dataset} needs {flag}")
    return arg_dict[key]


def _load_idx_dataset(options):
    data_dir = _require(options, "data_dir", "--data-dir", "idx")
    images, labels = find_idx_files(data_dir, options["split"])
    return load_idx(images, labels, class_count=options.get("classes"))


def _split(dataset, split):
    train, test = dataset.split()
    return train if split == "train" else test


def _load_csv_dataset(options):
    data_file = _require(options, "data_file", "--data-file", "csv")
    dataset = load_csv(
        data_file,
        options["label_column"],
        normalize=options["normalize"],
        class_count=options.get("classes"),
    )
    return _split(dataset, options["split"])


def _load_synthetic_dataset(options):
    dataset = synthetic_dataset(
        options["data_seed"], options["samples"], options.get("classes") or 2
    )
    return _split(dataset, options["split"])


DATASET_LOADERS = {
    "idx": _load_idx_dataset,
    "csv": _load_csv_dataset,
    "synthetic": _load_synthetic_dataset,
}


def load_dataset(arg_dict, class_count=None):
    """
    Load the dataset named by ``--dataset``, from the built-in loaders or
    from a plugin, and apply ``--limit``.

    `class_count` is used when ``--classes`` is not given.
    """
    name = arg_dict.get("dataset")
    limit = arg_dict.get("limit")
    if limit is not None and limit < 0:
        raise UsageError(f"--limit must be >= 0, got {limit}")
    options = dict(arg_dict)
    if options.get("split") is None:
        is_training = options["command"] == Command.TRAIN.value
        options["split"] = "train" if is_training else "test"
    if options.get("classes") is None:
        options["classes"] = class_count

    factory = DATASET_LOADERS.get(name)
    if factory is None:
        # The requested loader is not built into nn_debloat. See if another
        # Python package provides it.
        # pylint: disable=no-member
        hooks = _plugin_manager().hook.nn_debloat_dataset_loader
        for plugin_name, plugin_factory in hooks():
            if plugin_name == name:
                factory = plugin_factory
                break
    if factory is None:
        raise UsageError(f"unknown dataset '{name}'")

    dataset = factory(options)
    if not len(dataset):
        raise DatasetError(f"the {options['split']} split of '{name}' is empty")
    LOGGER.info(
        "dataset %s: %d samples, %d classes", name, len(dataset), dataset.class_count
    )
    return dataset.head(limit)


def _fgsm_config(arg_dict):
    epsilon = arg_dict.get("fgsm_eps")
    return FgsmConfig(
        epsilon=DEFAULT_EPSILON if epsilon is None else epsilon,
        low=arg_dict["input_low"],
        high=arg_dict["input_high"],
    )


def _wants_robustness(arg_dict, dataset):
    return (
        dataset.image_like
        or arg_dict["force_robustness"]
        or arg_dict.get("fgsm_eps") is not None
    )


def measure(model, dataset, arg_dict, epoch=0, fraction_pruned=0.0, file_size=None):
    """
    Build the `PruneReport` of `model`; accuracy columns stay empty
    without a dataset.
    """
    if file_size is None:
        _, file_size = size_report(model)
    test_accuracy = fgsm_accuracy = None
    if dataset is not None:
        test_accuracy = accuracy(model, dataset)
        if _wants_robustness(arg_dict, dataset):
            fgsm_accuracy = robustness(model, dataset, _fgsm_config(arg_dict))
    return PruneReport(
        epoch,
        fraction_pruned,
        model.param_count(),
        file_size,
        test_accuracy,
        fgsm_accuracy,
    )


def _load_model(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc.strerror}")


def _write_report(generator, path):
    if path is not None:
        with open(path, "wb") as output_file:
            generator.generate_report(output_file)


def _console(arg_dict):
    return io.BytesIO() if arg_dict["quiet"] else sys.stdout.buffer


def run_inspect(arg_dict):
    model = _load_model(arg_dict["model"])
    reporter = InspectReportGenerator(
        model,
        model_name=arg_dict["model"],
        file_size=os.path.getsize(arg_dict["model"]),
    )
    reporter.generate_report(_console(arg_dict))
    return 0


def run_train(arg_dict):
    arch = ArchSpec.parse(arg_dict["arch"])
    if not arg_dict.get("dataset"):
        raise UsageError("train needs --dataset")
    dataset = load_dataset(arg_dict)
    model = train_fixture(
        arch,
        dataset,
        epochs=arg_dict["epochs"],
        learning_rate=arg_dict["learning_rate"],
        seed=arg_dict["seed"],
        batch_size=arg_dict["batch_size"],
    )
    size = save_model(model, arg_dict["output"])
    LOGGER.info(
        "wrote %s: %d params, %d bytes", arg_dict["output"], model.param_count(), size
    )
    return 0


def _prune_config(arg_dict):
    try:
        return PruneConfig(
            target_fraction=arg_dict["target"],
            step_fraction=arg_dict["step"],
            input_box=Interval(arg_dict["input_low"], arg_dict["input_high"]),
            seed=arg_dict["seed"],
            strategy=arg_dict["strategy"],
        )
    except ValueError as exc:
        raise UsageError(str(exc))


def _default_output(model_path):
    root, _ = os.path.splitext(model_path)
    return f"{root}.pruned.pdm"


def run_prune(arg_dict):
    config = _prune_config(arg_dict)
    has_dataset = bool(arg_dict.get("dataset"))
    if not has_dataset and (arg_dict.get("report") or arg_dict.get("json_report")):
        raise UsageError("--report needs --dataset for its accuracy columns")
    output = arg_dict.get("output") or _default_output(arg_dict["model"])

    model = _load_model(arg_dict["model"])
    dataset = load_dataset(arg_dict, model.class_count) if has_dataset else None
    baseline = measure(model, dataset, arg_dict)

    def eval_hook(pruned, summary):
        return measure(
            pruned, dataset, arg_dict, summary.epoch, summary.fraction_pruned
        )

    reports = []
    failure = None
    try:
        for model, report in iter_schedule(model, config, eval_hook):
            reports.append(report)
    except RUNTIME_ERRORS as exc:
        epoch = len(reports) + 1
        failure = PruneFailure(epoch, config.fraction_after(epoch), str(exc))
        LOGGER.error("Pruning failed at epoch %d: %s", epoch, exc)

    if failure is None:
        save_model(model, output)
        LOGGER.info("wrote %s", output)

    generator_args = {
        "baseline": baseline,
        "failure": failure,
        "model_name": arg_dict["model"],
    }
    for generator_class, option in (
        (CsvReportGenerator, "report"),
        (JsonReportGenerator, "json_report"),
        (MarkdownReportGenerator, "markdown_report"),
    ):
        _write_report(generator_class(reports, **generator_args), arg_dict.get(option))
    StringReportGenerator(reports, **generator_args).generate_report(_console(arg_dict))
    return 0 if failure is None else 1


def run_eval(arg_dict):
    if not arg_dict.get("dataset"):
        raise UsageError("eval needs --dataset")
    model = _load_model(arg_dict["model"])
    dataset = load_dataset(arg_dict, model.class_count)
    report = measure(
        model, dataset, arg_dict, file_size=os.path.getsize(arg_dict["model"])
    )
    generator_args = {"baseline": report, "model_name": arg_dict["model"]}
    for generator_class, option in (
        (CsvReportGenerator, "report"),
        (JsonReportGenerator, "json_report"),
    ):
        _write_report(generator_class([report], **generator_args), arg_dict.get(option))
    StringReportGenerator([], **generator_args).generate_report(_console(arg_dict))
    return 0


COMMANDS = {
    Command.INSPECT.value: run_inspect,
    Command.TRAIN.value: run_train,
    Command.PRUNE.value: run_prune,
    Command.EVAL.value: run_eval,
}


def main(argv=None):
    """
    Main entry point for the tool, script installed via pyproject.toml
    Returns a value that can be passed into exit() specifying
    the exit code.
    2 is a usage or input-file error
    1 is a runtime failure
    0 is successful run
    """
    argv = sys.argv[1:] if argv is None else argv
    try:
        arg_dict = parse_args(argv)
    except ParserError as exc:
        logging.basicConfig(format="%(message)s")
        LOGGER.error("%s", exc)
        return 2

    if arg_dict["quiet"]:
        level = logging.ERROR
    elif arg_dict["verbose"]:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(format="%(message)s", level=level)

    try:
        return COMMANDS[arg_dict["command"]](arg_dict)
    except (UsageError,) + USAGE_ERRORS as exc:
        LOGGER.error("%s", exc)
        return 2
    except RUNTIME_ERRORS as exc:
        LOGGER.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
