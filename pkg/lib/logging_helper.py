# hierflow
# This helper module is used to provide a Log() object that uses the python 'logging' module, but adds additional info, like the module name.
# The log levels are taken from the 'logging' section of the active config (see lib.config_helper).

import logging
import os

DEFAULT_LOG_DIR = "logs"
VALID_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL", "NONE"]


class Log:
    """The Log class is used to provide a Log() object that uses the python 'logging' module, but adds additional info, like the module name.

    Args:
        module_name (str): The name of the module (e.g. 'components.flowdec')
        log_level (str): Level for both handlers, overrides the config if set
        log_level_file (str): Level of the file handler ('none' to take it from the config)
        log_level_stdout (str): Level of the stream handler ('none' to take it from the config)
    """

    def __init__(
        self,
        module_name,
        log_level="none",
        log_level_file="none",
        log_level_stdout="none",
    ):
        try:
            self.logger = logging.getLogger(module_name)
            self.logger.setLevel(logging.DEBUG)
            self.logger.propagate = False

            formatter = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")

            settings = {}
            if "lib.config_helper" not in module_name:  # Avoid circular import from config_helper
                import lib.config_helper as config_helper

                settings = config_helper.active_logging_settings()

            if log_level != "none":
                log_level_file = log_level if log_level_file == "none" else log_level_file
                log_level_stdout = log_level if log_level_stdout == "none" else log_level_stdout
            else:
                if log_level_file == "none":
                    log_level_file = settings.get("log_level_file", "none")
                if log_level_stdout == "none":
                    log_level_stdout = settings.get("log_level_stdout", "INFO")

            if self.logger.hasHandlers():  # Remove duplicate handlers
                self.logger.handlers.clear()

            if str(log_level_file).lower() != "none":
                log_dir = settings.get("log_dir", DEFAULT_LOG_DIR)
                if settings.get("split_files_by_module", False):
                    path = os.path.join(log_dir, module_name + ".log")
                else:
                    path = os.path.join(log_dir, "hierflow.log")
                os.makedirs(os.path.dirname(path), exist_ok=True)
                handler_file = logging.FileHandler(path)
                handler_file.setLevel(str(log_level_file).upper())
                handler_file.setFormatter(formatter)
                self.logger.addHandler(handler_file)

            if str(log_level_stdout).lower() != "none":
                handler_stream = logging.StreamHandler()
                handler_stream.setLevel(str(log_level_stdout).upper())
                handler_stream.setFormatter(formatter)
                self.logger.addHandler(handler_stream)
        except Exception as e:
            print(f"[CRITICAL] The logger object for {module_name} could not be initialized.")
            raise e

    def set_level(self, level):
        """Change the logging level of the logger object and also for all its handlers."""
        self.logger.setLevel(level.upper())

        # We have to set all handlers to the same level as well
        for handler in self.logger.handlers:
            handler.setLevel(level.upper())

    def debug(self, message):
        """Logs a debug message."""
        self.logger.debug(message)

    def info(self, message):
        """Logs an info message."""
        self.logger.info(message)

    def warning(self, message):
        """Logs a warning message."""
        self.logger.warning(message)

    def error(self, message):
        """Logs an error message."""
        self.logger.error(message)

    def critical(self, message):
        """Logs a critical message."""
        self.logger.critical(message)


def set_global_level(level):
    """Sets the level of every logger created through Log() so far (used by the '--debug' flag).

    Args:
        level (str): The new level

    Returns:
        None
    """
    for name, logger in logging.Logger.manager.loggerDict.items():
        if not isinstance(logger, logging.Logger) or logger.propagate:
            continue
        logger.setLevel(level.upper())
        for handler in logger.handlers:
            handler.setLevel(level.upper())
