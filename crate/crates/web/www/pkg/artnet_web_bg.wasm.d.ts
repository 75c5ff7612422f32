/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_clip_free: (a: number, b: number) => void;
export const architecture_names: () => [number, number];
export const architecture_report: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const clip_direction: (a: number) => [number, number];
export const clip_frames: (a: number) => number;
export const clip_height: (a: number) => number;
export const clip_label: (a: number) => number;
export const clip_pixels: (a: number) => [number, number];
export const clip_width: (a: number) => number;
export const motion_clip: (a: number, b: number, c: number, d: number) => [number, number, number];
export const phase_peak: (a: number, b: number, c: number) => [number, number, number];
export const phase_response: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
