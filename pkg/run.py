#!/usr/bin/env python
"""
Run script for the synthetic disaster data pipeline
"""
import sys

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from app.main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
