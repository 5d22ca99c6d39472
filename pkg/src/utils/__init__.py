# Logging, errors and configuration checks
