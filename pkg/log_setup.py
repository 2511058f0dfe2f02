import logging
import sys

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

QUIET, NORMAL, VERBOSE = 0, 1, 2
_LEVELS = {QUIET: logging.WARNING, NORMAL: logging.INFO, VERBOSE: logging.DEBUG}


def configure(verbosity=NORMAL):
    # 重复调用时替换 handler，测试里会多次进入 main()
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_rdp_handler', False):
            root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._rdp_handler = True
    root.addHandler(handler)
    root.setLevel(_LEVELS.get(verbosity, logging.INFO))
    return root


def progress_enabled(verbosity):
    return verbosity > QUIET
