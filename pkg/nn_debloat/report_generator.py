"""
Classes for generating pruning reports.
"""

import csv
import io
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from gettext import gettext, ngettext

from jinja2 import Environment, PackageLoader, select_autoescape

from nn_debloat.evaluation import PruneReport
from nn_debloat.pruning.scheduler import eligible_layers

CSV_HEADER = [
    "epoch",
    "fraction_pruned",
    "param_count",
    "file_size_bytes",
    "test_accuracy",
    "fgsm_accuracy",
]

_INT_FIELDS = ("epoch", "param_count", "file_size_bytes")


class ReportError(ValueError):
    """
    A report file does not follow the CSV report schema.
    """


@dataclass(frozen=True)
class PruneFailure:
    """
    The epoch that aborted a run, written as the terminal report row.
    """

    epoch: int
    fraction_pruned: float
    message: str


def _cell(value):
    # str() of a float is its shortest round-trip representation
    return "" if value is None else str(value)


def _percent(value, reference):
    if value is None or not reference:
        return None
    return 100.0 * value / reference


class BaseReportGenerator(ABC):
    """
    Generate a report from the per-epoch `PruneReport` rows of one run.
    """

    def __init__(self, reports, baseline=None, failure=None, model_name=None):
        """
        `baseline` is the unpruned model's report (epoch 0); `failure`
        is the `PruneFailure` that ended the run early, if any.
        """
        self._reports = list(reports)
        self._baseline = baseline
        self._failure = failure
        self._model_name = model_name

    @abstractmethod
    def generate_report(self, output_file):
        """
        Write the report to `output_file`, which is a file-like
        object implementing the `write()` method and taking bytes.
        """

    def parameter_reduction(self, report):
        """
        Percent of the baseline parameters removed in `report`, or None
        without a baseline.
        """
        if self._baseline is None:
            return None
        return 100.0 * (1 - report.param_count / self._baseline.param_count)

    def shrink_factor(self, report):
        if self._baseline is None or not report.param_count:
            return None
        return self._baseline.param_count / report.param_count

    def _row_stats(self, report):
        baseline = self._baseline
        return {
            "report": report,
            "parameter_reduction": self.parameter_reduction(report),
            "shrink_factor": self.shrink_factor(report),
            "accuracy_retained": _percent(
                report.test_accuracy, baseline and baseline.test_accuracy
            ),
            "robustness_retained": _percent(
                report.fgsm_accuracy, baseline and baseline.fgsm_accuracy
            ),
        }

    def report_dict(self):
        final = self._reports[-1] if self._reports else None
        return {
            "model_name": self._model_name,
            "baseline": self._baseline,
            "rows": [self._row_stats(report) for report in self._reports],
            "final": self._row_stats(final) if final is not None else None,
            "num_epochs": len(self._reports),
            "failure": self._failure,
        }


class CsvReportGenerator(BaseReportGenerator):
    """
    One CSV row per pruning epoch; a run that failed ends with a row
    holding only the epoch and fraction that were attempted.  The row keeps
    the six-column schema, so the error message itself only goes to the
    log, the console summary and the JSON report.
    """

    def generate_report(self, output_file):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for report in self._reports:
            writer.writerow([_cell(getattr(report, name)) for name in CSV_HEADER])
        if self._failure is not None:
            writer.writerow(
                [self._failure.epoch, self._failure.fraction_pruned, "", "", "", ""]
            )
        output_file.write(buffer.getvalue().encode("utf-8"))


class JsonReportGenerator(BaseReportGenerator):
    def generate_report(self, output_file):
        rows = [report.to_dict() for report in self._reports]
        if self._failure is not None:
            rows.append(
                {
                    "epoch": self._failure.epoch,
                    "fraction_pruned": self._failure.fraction_pruned,
                    "error": self._failure.message,
                }
            )
        json_report_str = json.dumps(rows)

        # all report generators are expected to write raw bytes, so we encode
        # the json
        output_file.write(json_report_str.encode("utf-8"))


def read_csv_report(path):
    """
    Parse a CSV report back into `PruneReport` rows.

    Empty cells become None, so a terminal error row comes back with only
    its epoch and fraction set.
    """
    with open(path, newline="", encoding="utf-8") as report_file:
        reader = csv.DictReader(report_file)
        if reader.fieldnames != CSV_HEADER:
            raise ReportError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for line_number, row in enumerate(reader, start=2):
            try:
                values = {
                    name: None
                    if cell == ""
                    else (int(cell) if name in _INT_FIELDS else float(cell))
                    for name, cell in row.items()
                }
            except (TypeError, ValueError):
                raise ReportError(f"{path}: malformed row {line_number}")
            rows.append(PruneReport(**values))
    return rows


# Set up the template environment
TEMPLATE_LOADER = PackageLoader(__package__)
TEMPLATE_ENV = Environment(
    extensions=["jinja2.ext.i18n"],
    loader=TEMPLATE_LOADER,
    trim_blocks=True,
    lstrip_blocks=True,
    autoescape=select_autoescape(),
)

# pylint thinks this callable does not exist, I assure you it does
TEMPLATE_ENV.install_gettext_callables(  # pylint: disable=no-member
    gettext=gettext, ngettext=ngettext, newstyle=True
)


def _render(template_path, context, output_file):
    report = TEMPLATE_ENV.get_template(template_path).render(context)
    output_file.write(report.encode("utf-8"))


class TemplateReportGenerator(BaseReportGenerator):
    """
    Reporter that uses a template to generate the report.
    """

    # Subclasses override this to specify the name of the template
    template_path = None

    def generate_report(self, output_file):
        """
        See base class.
        output_file must be a file handler that takes in bytes!
        """
        if self.template_path is not None:
            _render(self.template_path, self.report_dict(), output_file)


class StringReportGenerator(TemplateReportGenerator):
    """
    Generate a console summary of a pruning run.
    """

    template_path = "console_prune_report.txt"


class MarkdownReportGenerator(TemplateReportGenerator):
    """
    Generate a Markdown summary of a pruning run.
    """

    template_path = "markdown_prune_report.md"


class InspectReportGenerator:
    """
    Layer table of a model: kind, output shape, activation, parameters and
    the pruning strategy that applies to the layer.
    """

    template_path = "console_inspect_report.txt"

    def __init__(self, model, model_name=None, file_size=None):
        self._model = model
        self._model_name = model_name
        self._file_size = file_size

    def layer_rows(self):
        eligible = set(eligible_layers(self._model))
        rows = []
        for index, (layer, shape) in enumerate(
            zip(self._model.layers, self._model.shapes())
        ):
            if index not in eligible:
                strategy = None
            elif layer.kind == "conv2d":
                strategy = "channel scale"
            else:
                strategy = "pair merge"
            rows.append(
                {
                    "index": index,
                    "kind": layer.kind,
                    "shape": "x".join(map(str, shape)),
                    "activation": layer.activation.value,
                    "params": sum(tensor.size for tensor in layer.tensors().values()),
                    "strategy": strategy,
                }
            )
        return rows

    def report_dict(self):
        rows = self.layer_rows()
        return {
            "model_name": self._model_name,
            "input_shape": "x".join(map(str, self._model.input_shape)),
            "rows": rows,
            "total_params": self._model.param_count(),
            "num_eligible": sum(1 for row in rows if row["strategy"]),
            "file_size": self._file_size,
        }

    def generate_report(self, output_file):
        _render(self.template_path, self.report_dict(), output_file)
