PORT = 8080
DEBUG = True
