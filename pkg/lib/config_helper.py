# hierflow
# This helper module is used to provide a valid config object. To do that it will load the hierflow_config YAML file in the configs directory
# (or the file given with '--config'). It also provides an explicit function to check if the config is valid and
# turns a valid config into the typed RunConfig used by the commands.

import copy
import os

import yaml

from lib.class_helper import (
    ENCODER_FLAGS,
    ConfigurationError,
    CorpusConfig,
    DecoderConfig,
    EncoderConfig,
    FlowConfig,
    OptimizerConfig,
    RunConfig,
    SamplerConfig,
)

LOG_LEVEL = "CRITICAL"  # The log level of this config loader. This is not set by the config to prevent sending no message at all if the config file, which stores the log level itself, is not valid.
FILE_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs", "hierflow_config.yml")

_ACTIVE_SETTINGS = {}  # The settings of the last loaded config, used by the loggers


class Config:
    """The Config() class is used to provide a valid config object. To do that it will load the given YAML file.

    Args:
        path (str): The config file (default: configs/hierflow_config.yml)

    Attributes:
        cfg (dict): The validated settings
        path (str): The file the settings were loaded from
    """

    def __init__(self, path=None):
        import lib.logging_helper as logging_helper

        mlog = logging_helper.Log("lib.config_helper", log_level_stdout=LOG_LEVEL)
        self.path = path or FILE_PATH

        # Check if the config file exists
        if not os.path.isfile(self.path):
            mlog.critical(f"The config file '{self.path}' does not exist.")
            raise ConfigurationError(f"The config file '{self.path}' does not exist.")

        with open(self.path, "r") as ymlfile:
            try:
                self.cfg = yaml.safe_load(ymlfile)
            except yaml.YAMLError as e:
                mlog.critical(f"The config file is not valid YAML: {e}")
                raise ConfigurationError(f"The config file is not valid YAML: {e}") from e

        if self.cfg is None:
            mlog.critical("The config file is empty.")
            raise ConfigurationError("The config file is empty.")

        if type(self.cfg) != dict:
            mlog.critical("The config file is not valid. Please check the config file and try again.")
            raise ConfigurationError("The config file is not valid.")

        # Check if an entry in the config file is supposed to be an environment variable
        try:
            if self.cfg["setup"]["load_environment_variables"] == True:
                replace_env_vars(cfg=self.cfg, mlog=mlog)
            else:
                mlog.debug("Not loading environment variables from config file.")
        except KeyError:
            mlog.warning("Did not load environment variables from config file. Setting whether to enable it not found.")

        if not check_config(self.cfg, mlog):
            mlog.critical("The config file is not valid. Please check the config file and try again.")
            raise ConfigurationError("The config file is not valid.")

        _ACTIVE_SETTINGS.clear()
        _ACTIVE_SETTINGS.update(copy.deepcopy(self.cfg))


def active_logging_settings():
    """Returns the 'logging' section of the last loaded config (or of the default file if none was loaded yet).

    Returns:
        dict: The logging settings (empty if no config is available)
    """
    if not _ACTIVE_SETTINGS and os.path.isfile(FILE_PATH):
        try:
            with open(FILE_PATH, "r") as ymlfile:
                raw = yaml.safe_load(ymlfile) or {}
            return dict(raw.get("logging", {}))
        except (OSError, yaml.YAMLError, AttributeError):
            return {}
    return dict(_ACTIVE_SETTINGS.get("logging", {}))


def replace_env_vars(cfg, mlog):
    """Replaces every string value of the form '$NAME' with the value of the environment variable NAME.

    Args:
        cfg (dict): The config object (altered in place)
        mlog (Log): The logger object

    Returns:
        None
    """
    for key, value in cfg.items():
        if isinstance(value, dict):
            replace_env_vars(value, mlog)
        elif isinstance(value, str) and value.startswith("$"):
            env_var_name = value[1:]
            env_var_value = os.environ.get(env_var_name)
            if env_var_value is None:
                mlog.critical(
                    f"The environment variable '{env_var_name}' used in the config '{key}' is not set. Export it (or remove the '$' before the value) and try again."
                )
                raise ConfigurationError(f"The environment variable {env_var_name} is not set.")
            if env_var_value.isdigit():
                cfg[key] = int(env_var_value)
            elif env_var_value.lower() == "true":
                cfg[key] = True
            elif env_var_value.lower() == "false":
                cfg[key] = False
            else:
                cfg[key] = env_var_value


def check_config_log_level(log_level, mlog):
    """The check_config_log_level() function is used to check if the log level is valid.

    Args:
        log_level (str): The log level
        mlog (Log): The logger object

    Returns:
        True if the log level is valid, False if not
    """
    if type(log_level) != str or log_level.upper() not in ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL", "NONE"]:
        mlog.critical(
            f"Could not load config file: {log_level} not one of ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL', 'none']. Please check the config file and try again."
        )
        return False
    return True


def check_config_bool(bool_var, mlog, name="A boolean setting"):
    """Check if a variable is a valid boolean.

    Args:
        bool_var (bool): The variable to check

    Returns:
        True if the variable is a valid boolean, False if not
    """
    if type(bool_var) != bool:
        mlog.critical(f"{name} is not one of [True, False]. Please check the config file.")
        return False
    return True


def check_config_int(int_var, mlog, name="An integer setting", minimum=0):
    """Check if a variable is a valid integer above or equal to minimum.

    Args:
        int_var (int): The variable to check
        minimum (int): The smallest allowed value

    Returns:
        True if the variable is a valid integer, False if not
    """
    if type(int_var) != int or int_var < minimum:
        mlog.critical(f"{name} is not a valid integer >= {minimum}. Please check the config file.")
        return False
    return True


def check_config_float(float_var, mlog, name="A number setting", minimum=0.0, maximum=None):
    """Check if a variable is a valid number within [minimum, maximum].

    Args:
        float_var (float): The variable to check (ints are accepted)
        minimum (float): The smallest allowed value
        maximum (float): The largest allowed value (None for no bound)

    Returns:
        True if the variable is a valid number, False if not
    """
    if type(float_var) not in (int, float) or float_var < minimum or (maximum is not None and float_var > maximum):
        bounds = f"[{minimum}, {maximum}]" if maximum is not None else f">= {minimum}"
        mlog.critical(f"{name} is not a valid number {bounds}. Please check the config file.")
        return False
    return True


def check_config(cfg, mlog):
    """The check_config() function is used to check if the config is valid.

    Args:
        cfg (dict): The config object
        mlog (Log): The logger object

    Returns:
        True if the config is valid, False if not
    """
    try:
        # logging
        if not check_config_log_level(cfg["logging"]["log_level_stdout"], mlog):
            return False
        if not check_config_log_level(cfg["logging"]["log_level_file"], mlog):
            return False
        if not check_config_bool(cfg["logging"]["split_files_by_module"], mlog, "logging.split_files_by_module"):
            return False

        # setup
        if not check_config_bool(cfg["setup"]["load_environment_variables"], mlog, "setup.load_environment_variables"):
            return False

        # paths
        for key in ["corpus", "checkpoints", "out"]:
            if type(cfg["paths"][key]) != str or cfg["paths"][key] == "":
                mlog.critical(f"paths.{key} has to be a non-empty path. Please check the config file.")
                return False

        # corpus
        for key in [
            "n_samples",
            "n_units",
            "n_clusters",
            "lip_layers",
            "lip_dim",
            "face_dim",
            "expr_dim",
            "speaker_dim",
            "timbre_dim",
            "content_dim",
            "min_frames",
            "max_frames",
            "unit_frames",
            "harmonics",
        ]:
            if not check_config_int(cfg["corpus"][key], mlog, f"corpus.{key}", minimum=1):
                return False
        if not check_config_float(cfg["corpus"]["noise"], mlog, "corpus.noise"):
            return False

        # encoder
        for key in ["hidden_dim", "heads", "mapper_layers", "output_layers", "predictor_blocks", "kernel_size"]:
            if not check_config_int(cfg["encoder"][key], mlog, f"encoder.{key}", minimum=1):
                return False
        if not check_config_float(cfg["encoder"]["label_smoothing"], mlog, "encoder.label_smoothing", 0.0, 1.0):
            return False

        # ablation
        for flag in ENCODER_FLAGS:
            if not check_config_bool(cfg["ablation"][flag], mlog, f"ablation.{flag}"):
                return False

        # decoder
        channels = cfg["decoder"]["channels"]
        if type(channels) != list or len(channels) != 2 or any(type(c) != int or c < 1 for c in channels):
            mlog.critical("decoder.channels has to be a list of two positive integers. Please check the config file.")
            return False
        for key in ["time_embedding_dim", "heads", "kernel_size"]:
            if not check_config_int(cfg["decoder"][key], mlog, f"decoder.{key}", minimum=1):
                return False

        # flow
        if not check_config_float(cfg["flow"]["sigma_min"], mlog, "flow.sigma_min", 0.0, 1.0):
            return False
        if not check_config_float(cfg["flow"]["cfg_drop_prob"], mlog, "flow.cfg_drop_prob", 0.0, 1.0):
            return False
        for key in ["lambda_c", "lambda_t", "lambda_p"]:
            if not check_config_float(cfg["flow"][key], mlog, f"flow.{key}"):
                return False
        if not check_config_bool(cfg["flow"]["cosine_schedule"], mlog, "flow.cosine_schedule"):
            return False
        if cfg["flow"]["prior"] not in ["standard", "mu_centered"]:
            mlog.critical("flow.prior not one of ['standard', 'mu_centered']. Please check the config file.")
            return False

        # sampler
        if not check_config_int(cfg["sampler"]["steps"], mlog, "sampler.steps", minimum=1):
            return False
        if not check_config_float(cfg["sampler"]["beta"], mlog, "sampler.beta"):
            return False
        if not check_config_int(cfg["sampler"]["seed"], mlog, "sampler.seed"):
            return False

        # optimizer
        if not check_config_float(cfg["optimizer"]["lr"], mlog, "optimizer.lr"):
            return False
        for key in ["beta1", "beta2"]:
            if not check_config_float(cfg["optimizer"][key], mlog, f"optimizer.{key}", 0.0, 1.0):
                return False
        if not check_config_float(cfg["optimizer"]["eps"], mlog, "optimizer.eps"):
            return False
        if not check_config_float(cfg["optimizer"]["weight_decay"], mlog, "optimizer.weight_decay"):
            return False
        if not check_config_float(cfg["optimizer"]["lr_decay"], mlog, "optimizer.lr_decay", 0.0, 1.0):
            return False
        if not check_config_int(cfg["optimizer"]["lr_decay_every"], mlog, "optimizer.lr_decay_every", minimum=1):
            return False

        # training
        for key in ["seed", "steps"]:
            if not check_config_int(cfg["training"][key], mlog, f"training.{key}"):
                return False
        for key in ["crop_frames", "checkpoint_interval", "log_flush_interval"]:
            if not check_config_int(cfg["training"][key], mlog, f"training.{key}", minimum=1):
                return False

        # eval, sweep, ablate
        if not check_config_int(cfg["eval"]["samples"], mlog, "eval.samples", minimum=1):
            return False
        if not check_config_int(cfg["eval"]["griffin_lim_iters"], mlog, "eval.griffin_lim_iters", minimum=1):
            return False
        betas = cfg["sweep"]["betas"]
        if type(betas) != list or len(betas) == 0 or any(type(b) not in (int, float) or b < 0 for b in betas):
            mlog.critical("sweep.betas has to be a non-empty list of numbers >= 0. Please check the config file.")
            return False
        if not check_config_int(cfg["ablate"]["steps"], mlog, "ablate.steps"):
            return False

        # toy_flow
        for key in ["steps", "hidden_dim", "batch_size", "samples_per_class", "sample_steps", "reference_steps", "seed"]:
            if not check_config_int(cfg["toy_flow"][key], mlog, f"toy_flow.{key}"):
                return False
        if not check_config_float(cfg["toy_flow"]["lr"], mlog, "toy_flow.lr"):
            return False

    except (KeyError, TypeError) as e:
        mlog.critical(f"Could not load config file: Setting not found: {e}. Please check the config file and try again.")
        return False

    return True


def build_run_config(cfg, seed=None, steps=None, beta=None, out=None):
    """Turns a validated config into a RunConfig, applying the command line overrides.

    Args:
        cfg (dict): The validated config
        seed (int): Overrides training.seed (and the corpus seed) if set
        steps (int): Overrides training.steps if set
        beta (float): Overrides sampler.beta if set
        out (str): Overrides paths.out if set

    Returns:
        RunConfig: The typed configuration
    """
    corpus = CorpusConfig(**cfg["corpus"])
    encoder_settings = dict(cfg["encoder"])
    encoder_settings.update(cfg["ablation"])
    encoder = EncoderConfig(
        n_units=corpus.n_clusters,
        lip_layers=corpus.lip_layers,
        lip_dim=corpus.lip_dim,
        face_dim=corpus.face_dim,
        expr_dim=corpus.expr_dim,
        timbre_dim=corpus.timbre_dim,
        **encoder_settings,
    )
    decoder = DecoderConfig(**cfg["decoder"])
    flow = FlowConfig(**cfg["flow"])
    sampler_settings = dict(cfg["sampler"])
    if beta is not None:
        sampler_settings["beta"] = beta
    sampler = SamplerConfig(**sampler_settings)
    optimizer_settings = dict(cfg["optimizer"])
    decay_every = optimizer_settings.pop("lr_decay_every")
    optimizer_settings["lr_decay"] = optimizer_settings["lr_decay"] ** (1.0 / decay_every)
    optimizer = OptimizerConfig(**optimizer_settings)

    return RunConfig(
        corpus_path=cfg["paths"]["corpus"],
        seed=cfg["training"]["seed"] if seed is None else seed,
        corpus=corpus,
        encoder=encoder,
        decoder=decoder,
        flow=flow,
        sampler=sampler,
        optimizer=optimizer,
        train_steps=cfg["training"]["steps"] if steps is None else steps,
        crop_frames=cfg["training"]["crop_frames"],
        checkpoint_dir=cfg["paths"]["checkpoints"],
        out_dir=cfg["paths"]["out"] if out is None else out,
        checkpoint_interval=cfg["training"]["checkpoint_interval"],
        log_flush_interval=cfg["training"]["log_flush_interval"],
        eval_samples=cfg["eval"]["samples"],
        griffin_lim_iters=cfg["eval"]["griffin_lim_iters"],
        sweep_betas=[float(b) for b in cfg["sweep"]["betas"]],
        ablate_steps=cfg["ablate"]["steps"],
    )
