/* Writes <size> bytes as newline-terminated records, one fwrite per record. */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

int main(int argc, char **argv)
{
	if (argc < 4) {
		fprintf(stderr, "usage: %s <output> <size-bytes> <record-width>\n", argv[0]);
		return 2;
	}
	unsigned long long size = strtoull(argv[2], NULL, 10);
	size_t width = strtoul(argv[3], NULL, 10);
	if (width < 2) {
		fprintf(stderr, "record width must be at least 2\n");
		return 2;
	}
	char *rec = malloc(width);
	FILE *f = fopen(argv[1], "wb");
	if (!f || !rec) {
		perror(argv[1]);
		return 1;
	}
	for (size_t i = 0; i + 1 < width; i++)
		rec[i] = 'a' + (char)(i % 26);
	rec[width - 1] = '\n';

	unsigned long long written = 0;
	while (written < size) {
		size_t n = size - written < width ? (size_t)(size - written) : width;
		if (fwrite(rec, 1, n, f) != n) {
			perror("fwrite");
			return 1;
		}
		written += n;
	}
	fclose(f);
	free(rec);
	return 0;
}
