import os, sys
import logging

LOG_LEVELS = {'error': logging.ERROR, 'info': logging.INFO, 'debug': logging.DEBUG}
LOG_ENV_VAR = 'HITMDP_LAB_LOG'
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def level_from_env(default='info'):
    """
    Read the log verbosity from the HITMDP_LAB_LOG environment variable
    """
    value = os.environ.get(LOG_ENV_VAR, default).strip().lower()
    if value not in LOG_LEVELS:
        logging.getLogger(__name__).warning(f'Unknown {LOG_ENV_VAR} value [{value}], using info')
        value = 'info'
    return LOG_LEVELS[value]


def set_logger(logfilename, loggername, thelevel=logging.INFO):
    """
    Set-up the logging system and return a logger object. Exit if this fails
    """

    try:
        #create logger
        logger = logging.getLogger(loggername)
        if not isinstance(thelevel, int):
            logger.setLevel(logging.DEBUG)
        else:
            logger.setLevel(thelevel)

        # re-running a command in the same process must not stack handlers
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()

        formatter = logging.Formatter(LOG_FORMAT)
        console = logging.StreamHandler()
        console.setLevel(logging.DEBUG)
        console.setFormatter(formatter)
        logger.addHandler(console)

        if logfilename is not None:
            os.makedirs(os.path.dirname(os.path.abspath(logfilename)), exist_ok=True)
            ch = logging.FileHandler(logfilename, mode='w')
            ch.setLevel(logging.DEBUG)
            ch.setFormatter(formatter)
            logger.addHandler(ch)
            logger.debug("File logging to " + logfilename)
        return logger
    except IOError:
        print( "ERROR: Failed to initialize logger with logfile: " + str(logfilename))
        sys.exit(2)
