import os
import sys
from pathlib import Path

from django.core.management import execute_from_command_line


def main():
    project_dir = Path(__file__).resolve().parent / "insightsite"
    sys.path.insert(0, str(project_dir))
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "insightsite.settings")

    argv = [sys.argv[0], *(sys.argv[1:] or ["help", "--commands"])]
    execute_from_command_line(argv)


if __name__ == "__main__":
    main()
