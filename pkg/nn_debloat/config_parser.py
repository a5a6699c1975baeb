import abc
import enum

try:
    import tomli as toml

    _HAS_TOML = True
except ImportError:  # pragma: no cover
    _HAS_TOML = False

if not _HAS_TOML:
    try:
        import tomllib as toml

        _HAS_TOML = True
    except ImportError:  # pragma: no cover
        pass

SECTION = "nn_debloat"


class Command(enum.Enum):
    INSPECT = "inspect"
    TRAIN = "train"
    PRUNE = "prune"
    EVAL = "eval"


class ParserError(Exception):
    """
    The configuration file is unreadable or has no nn_debloat table.
    """


class ConfigParser(abc.ABC):
    def __init__(self, file_name, command):
        self._file_name = file_name
        self._command = Command(command)

    @abc.abstractmethod
    def parse(self):
        """Returns a dict of the parsed data or None if the file cannot be handled."""


class TOMLParser(ConfigParser):
    """
    Reads ``[tool.nn_debloat]`` and lets ``[tool.nn_debloat.<command>]``
    override it for one sub-command.
    """

    def parse(self):
        if not self._file_name.endswith(".toml"):
            return None

        if not _HAS_TOML:
            raise ParserError("No Toml lib installed")

        try:
            with open(self._file_name, "rb") as file_handle:
                config = toml.load(file_handle)
        except OSError as exc:
            raise ParserError(f"Cannot read {self._file_name}: {exc.strerror}")
        except toml.TOMLDecodeError as exc:
            raise ParserError(f"Invalid TOML in {self._file_name}: {exc}")

        section = config.get("tool", {}).get(SECTION, {})
        if not section:
            raise ParserError(f"No 'tool.{SECTION}' configuration available")

        commands = {command.value for command in Command}
        merged = {
            key.replace("-", "_"): value
            for key, value in section.items()
            if key not in commands
        }
        for key, value in section.get(self._command.value, {}).items():
            merged[key.replace("-", "_")] = value
        return merged


_PARSERS = [TOMLParser]


def _parse_config_file(file_name, command):
    for parser_class in _PARSERS:
        parser = parser_class(file_name, command)
        config = parser.parse()
        if config is not None:
            return config

    raise ParserError(f"No config parser could handle {file_name}")


def get_config(parser, argv, defaults, command=None):
    """
    Merge built-in `defaults`, the configuration file named by
    ``--config-file`` and the parsed command line, later layers winning.

    `command` defaults to the sub-command the parser selected.
    """
    cli_config = vars(parser.parse_args(argv))
    if command is None:
        command = cli_config["command"]
    if cli_config.get("config_file"):
        file_config = _parse_config_file(cli_config["config_file"], command)
    else:
        file_config = {}

    config = dict(defaults)
    for config_dict in [file_config, cli_config]:
        for key, value in config_dict.items():
            if value is None:
                # if the value is None, it's a default one; only override if not present
                config.setdefault(key, value)
            else:
                # else just override the existing value
                config[key] = value

    return config
