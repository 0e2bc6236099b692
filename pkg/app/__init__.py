# 空的__init__.py文件，使目录成为包