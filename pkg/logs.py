import os

from aws_lambda_powertools import Logger

# -------------------------
# Logging settings
# -------------------------
SERVICE_NAME = "structfilt"
LOG_LEVEL = os.environ.get("STRUCTFILT_LOG_LEVEL", "WARNING")

# One structured logger for the whole package; modules import this instance.
logger = Logger(service=SERVICE_NAME, level=LOG_LEVEL)
