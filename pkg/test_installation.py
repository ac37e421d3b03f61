#!/usr/bin/env python3
"""
Test script to verify BASEN toolkit installation
"""

import sys
import importlib

def test_imports():
    """Test if all required modules can be imported."""
    required_modules = [
        'pandas',
        'openpyxl',
        'numpy',
        'scipy',
        'torch',
        'matplotlib',
        'tqdm',
        'joblib',
        'pytest'
    ]

    print("Testing required module imports...")

    failed_modules = []
    for module in required_modules:
        try:
            importlib.import_module(module)
            print(f"✓ {module} - OK")
        except ImportError as e:
            print(f"✗ {module} - FAILED: {e}")
            failed_modules.append(module)

    if failed_modules:
        print(f"\n[INFO] {len(failed_modules)} module(s) not installed: {', '.join(failed_modules)}")
        print("[INFO] Run 'pip install -r requirements.txt' to install missing modules")
        return False

    return True

def test_project_structure():
    """Test if project structure is correct."""
    import os

    required_files = [
        'src/main.py',
        'src/cli/commands.py',
        'src/backend/basen.py',
        'src/backend/selection.py',
        'src/backend/trainer.py',
        'src/backend/config_manager.py',
        'config/default_settings.json',
        'config/layouts/grid16.csv'
    ]

    print("\nTesting project structure...")

    for file_path in required_files:
        if os.path.exists(file_path):
            print(f"✓ {file_path} - OK")
        else:
            print(f"✗ {file_path} - MISSING")
            return False

    return True

def test_default_config():
    """Test if the bundled configuration validates."""
    print("\nTesting default configuration...")
    try:
        from src.backend.config_manager import ConfigManager
        ConfigManager('config/default_settings.json').get_run_config()
    except Exception as e:
        print(f"✗ config/default_settings.json - INVALID: {e}")
        return False
    print("✓ config/default_settings.json - OK")
    return True

def main():
    """Main test function."""
    print("BASEN Toolkit - Installation Test")
    print("=" * 40)

    # Test imports
    imports_ok = test_imports()

    # Test project structure
    structure_ok = test_project_structure()

    # Test configuration (needs the imports)
    config_ok = imports_ok and test_default_config()

    print("\n" + "=" * 40)
    if imports_ok and structure_ok and config_ok:
        print("✓ All tests passed! The toolkit should work correctly.")
        print("\nTo run the test suite:")
        print("pytest")
    else:
        print("✗ Some tests failed. Please check the installation.")
        sys.exit(1)

if __name__ == "__main__":
    main()
