import json
import os
from datetime import datetime

# Keys that never reach a log file
SENSITIVE_KEYS = {'api_key', 'captioner_api_key', 'captioner_secret', 'authorization', 'sign', 'x-signature'}


def scrub(mapping):
    """Drop credential-like keys (case-insensitive) from a flat mapping"""
    return {key: value for key, value in mapping.items() if str(key).lower() not in SENSITIVE_KEYS}


def write_run_log(log_dir, source, request_log, response_log, prefix='run'):
    """Write one timestamped JSON log with a request and a response section.

    Returns the path of the written file, or None when logging is disabled
    (log_dir is None).
    """
    if log_dir is None:
        return None
    os.makedirs(log_dir, exist_ok=True)
    timestamp_str = datetime.now().strftime("%Y%m%d%H%M%S%f")
    log_file_path = os.path.join(log_dir, f"{prefix}_{timestamp_str}.json")

    log_data = {
        "Source": source,
        "Request Log": {"Request Time": datetime.now().strftime("%Y-%m-%d %H:%M:%S"), **scrub(request_log)},
        "Response Log": {"Response Time": datetime.now().strftime("%Y-%m-%d %H:%M:%S"), **scrub(response_log)},
    }
    with open(log_file_path, 'w', encoding='utf-8') as log_file:
        json.dump(log_data, log_file, indent=4, default=str)
    return log_file_path
