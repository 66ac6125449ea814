# pipeline/backup_utils.py
from __future__ import annotations

import logging
import shutil
from pathlib import Path
from typing import Optional

LAST_GOOD_NAME = "last_good.ckpt"


def get_backup_location(backup_location: str) -> Optional[Path]:
    """
    Resolve the configured backup location.
    Returns None if backup is disabled (empty or whitespace setting).
    """
    if backup_location and backup_location.strip():
        return Path(backup_location.strip())
    return None


def save_backup_checkpoint(checkpoint_path: Path, run_name: str, backup_location: str) -> Optional[Path]:
    """
    Copy a checkpoint to the backup location under <backup>/<run_name>/.

    Failures are logged and swallowed; training never stops because a backup
    could not be written.

    Returns:
        Path to the backup file if successful, None otherwise
    """
    backup_root = get_backup_location(backup_location)
    if backup_root is None:
        return None

    if not checkpoint_path.exists():
        logging.warning("[%s] Backup skipped: checkpoint not found at %s", run_name, checkpoint_path)
        return None

    try:
        backup_dir = backup_root / run_name
        backup_dir.mkdir(parents=True, exist_ok=True)
        backup_path = backup_dir / checkpoint_path.name
        shutil.copy2(checkpoint_path, backup_path)
        logging.info("[%s] Backup saved to: %s", run_name, backup_path)
        return backup_path
    except PermissionError as e:
        logging.warning("[%s] Permission denied saving backup to %s - %s", run_name, backup_root, e)
        return None
    except OSError as e:
        logging.warning("[%s] OS error saving backup to %s - %s", run_name, backup_root, e)
        return None


def refresh_last_good(checkpoint_path: Path) -> Path:
    """Copy the newest good checkpoint next to it as last_good.ckpt."""
    target = checkpoint_path.with_name(LAST_GOOD_NAME)
    shutil.copy2(checkpoint_path, target)
    return target
