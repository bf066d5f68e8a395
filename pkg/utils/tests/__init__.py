# Tests marker