#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
仿真批次的PDF报告：单批次表格页，扫描时合并为带目录、书签和页码的文档
"""

import os
import json
import logging
import tempfile
from typing import Any, List, Mapping, Sequence, Tuple

import fitz  # PyMuPDF
from reportlab.pdfgen import canvas
from reportlab.lib.pagesizes import A4
from reportlab.pdfbase import pdfmetrics
from reportlab.pdfbase.ttfonts import TTFont
from reportlab.lib.colors import black, lightgrey

from . import __version__
from .errors import ReportError
from .sim import ErrorCdf

# CDF 表中的误差阈值（米）
CDF_THRESHOLDS = (0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0)

_FONT_CANDIDATES = [
    ("SimHei", r"C:\Windows\Fonts\simhei.ttf"),
    ("MSYaHei", r"C:\Windows\Fonts\msyh.ttc"),
    ("SimSun", r"C:\Windows\Fonts\simsun.ttc"),
    ("NotoSansCJK", "/usr/share/fonts/opentype/noto/NotoSansCJK-Regular.ttc"),
    ("WenQuanYi", "/usr/share/fonts/truetype/wqy/wqy-microhei.ttc"),
    ("PingFang", "/System/Library/Fonts/PingFang.ttc"),
]


class ChineseFontManager:
    """中文字体管理器，找不到字体时退回 Helvetica"""

    def __init__(self):
        self.font_registered = False
        self.font_name = "Helvetica"

    def register_chinese_font(self) -> str:
        if self.font_registered:
            return self.font_name

        for name, path in _FONT_CANDIDATES:
            if not os.path.exists(path):
                continue
            try:
                pdfmetrics.registerFont(TTFont(name, path))
                self.font_name = name
                logging.info(f"成功注册中文字体: {name} ({path})")
                break
            except Exception as e:
                logging.debug(f"注册字体失败 {path}: {e}")

        if self.font_name == "Helvetica":
            logging.warning("未找到中文字体，将使用默认字体")
        self.font_registered = True
        return self.font_name


_fonts = ChineseFontManager()


def _label(text: str, font_name: str) -> str:
    """没有中文字体时只保留括号里的英文部分"""
    if font_name != "Helvetica" or "(" not in text:
        return text
    return text[text.index("(") + 1:text.rindex(")")]


def _config_lines(config: Mapping[str, Any], prefix: str = "") -> List[str]:
    lines = []
    for key, value in config.items():
        if isinstance(value, Mapping):
            lines.extend(_config_lines(value, f"{prefix}{key}."))
        else:
            lines.append(f"{prefix}{key} = {json.dumps(value, ensure_ascii=False)}")
    return lines


def write_campaign_pdf(summary: Mapping[str, Any], cdf: ErrorCdf, path: str, title: str = "") -> str:
    """绘制单个批次的报告页：配置回显、分位数、失败数和 CDF 表"""
    try:
        c = canvas.Canvas(path, pagesize=A4)
        page_width, page_height = A4
        font_name = _fonts.register_chinese_font()
        margin = 50
        line_height = 16

        c.setTitle(title or "NLoS定位仿真报告")
        c.setAuthor("NLoSLocate")
        c.setSubject("仿真批次统计")

        y = page_height - margin - 20
        c.setFont(font_name, 18)
        heading = title or _label("定位误差统计 (Positioning error summary)", font_name)
        c.drawString((page_width - c.stringWidth(heading, font_name, 18)) / 2, y, heading)
        y -= 2 * line_height

        c.setFont(font_name, 11)
        c.setFillColor(black)
        pct = summary.get("percentiles", {})
        rows = [
            (_label("试验总数 (trials)", font_name), str(summary.get("n_trials", len(cdf)))),
            (_label("成功 (succeeded)", font_name), str(summary.get("n_success", len(cdf)))),
            (_label("失败 (failed)", font_name), str(summary.get("n_failed", 0))),
            ("p50 [m]", f"{pct.get('p50', cdf.percentile(0.5)):.3f}"),
            ("p90 [m]", f"{pct.get('p90', cdf.percentile(0.9)):.3f}"),
            ("p95 [m]", f"{pct.get('p95', cdf.percentile(0.95)):.3f}"),
        ]
        if "wall_time_s" in summary:
            rows.append((_label("耗时 (wall time) [s]", font_name), f"{summary['wall_time_s']:.1f}"))
        for name, value in rows:
            c.drawString(margin, y, name)
            c.drawString(margin + 200, y, value)
            y -= line_height

        y -= line_height
        c.setFont(font_name, 13)
        c.drawString(margin, y, _label("误差分布 (CDF)", font_name))
        y -= line_height
        c.setFont(font_name, 11)
        c.drawString(margin, y, "e [m]")
        c.drawString(margin + 200, y, "F(e)")
        y -= 4
        c.setStrokeColor(lightgrey)
        c.line(margin, y, page_width - margin, y)
        y -= line_height - 4
        for threshold in CDF_THRESHOLDS:
            c.drawString(margin, y, f"{threshold:.2f}")
            c.drawString(margin + 200, y, f"{cdf(threshold):.3f}")
            y -= line_height

        config = summary.get("config") or {}
        if config:
            y -= line_height
            c.setFont(font_name, 13)
            c.drawString(margin, y, _label("配置 (configuration)", font_name))
            y -= line_height
            c.setFont(font_name, 9)
            for line in _config_lines(config):
                if y < margin + 30:
                    c.showPage()
                    c.setFont(font_name, 9)
                    y = page_height - margin
                c.drawString(margin, y, line[:110])
                y -= 12

        c.save()
    except Exception as e:
        raise ReportError(f"生成报告失败 {path}: {e}") from e

    logging.info(f"报告页已生成: {path}")
    return path


def _toc_pdf(entries: Sequence[Tuple[str, int]]) -> str:
    """目录页，entries 为 (标题, 起始页码)"""
    fd, toc_path = tempfile.mkstemp(prefix="toc_", suffix=".pdf")
    os.close(fd)

    c = canvas.Canvas(toc_path, pagesize=A4)
    page_width, page_height = A4
    font_name = _fonts.register_chinese_font()
    margin = 50
    line_height = 25
    y = page_height - margin - 80

    c.setFont(font_name, 24)
    heading = _label("目录 (Contents)", font_name)
    c.drawString((page_width - c.stringWidth(heading, font_name, 24)) / 2, y + 40, heading)

    c.setFont(font_name, 12)
    c.setFillColor(black)
    for i, (title, start_page) in enumerate(entries):
        text = f"{i + 1}. {title}"
        page_text = str(start_page)
        c.drawString(margin, y, text)
        page_width_text = c.stringWidth(page_text, font_name, 12)
        c.drawString(page_width - margin - page_width_text, y, page_text)

        # 点线
        c.setFillColor(lightgrey)
        x = margin + c.stringWidth(text, font_name, 12) + 10
        while x < page_width - margin - page_width_text - 10:
            c.circle(x, y + 3, 0.5, stroke=0, fill=1)
            x += 4
        c.setFillColor(black)

        y -= line_height
        if y < margin + 50:
            c.showPage()
            c.setFont(font_name, 12)
            y = page_height - margin
    c.save()
    return toc_path


def _add_bottom_page_numbers(doc: "fitz.Document"):
    for page_num in range(doc.page_count):
        page = doc[page_num]
        text = f"- {page_num + 1} -"
        x = (page.rect.width - len(text) * 5) / 2
        page.insert_text((x, page.rect.height - 25), text, fontsize=10, fontname="helv", color=(0, 0, 0))


def merge_reports(entries: Sequence[Tuple[str, str]], output: str) -> str:
    """合并多个报告PDF，加目录页、书签和连续页码"""
    if not entries:
        raise ReportError("没有可以合并的报告")

    counts: List[Tuple[str, str, int]] = []
    for title, pdf_path in entries:
        if not os.path.exists(pdf_path):
            raise ReportError(f"报告文件不存在: {pdf_path}")
        with fitz.open(pdf_path) as doc:
            counts.append((title, pdf_path, doc.page_count))

    # 目录页先按单页估算，若目录超过一页再重排
    toc_pages = 1
    while True:
        starts, page = [], toc_pages + 1
        for _, _, n in counts:
            starts.append(page)
            page += n
        toc_path = _toc_pdf([(title, start) for (title, _, _), start in zip(counts, starts)])
        with fitz.open(toc_path) as toc_doc:
            actual = toc_doc.page_count
        if actual == toc_pages:
            break
        os.remove(toc_path)
        toc_pages = actual

    try:
        out = fitz.open()
        with fitz.open(toc_path) as toc_doc:
            out.insert_pdf(toc_doc)
        bookmarks = []
        for title, pdf_path, _ in counts:
            bookmarks.append([1, title, out.page_count + 1])
            with fitz.open(pdf_path) as src:
                out.insert_pdf(src)
        out.set_toc(bookmarks)
        _add_bottom_page_numbers(out)
        out.set_metadata({
            "title": "NLoS定位仿真报告",
            "author": "NLoSLocate",
            "subject": f"{len(counts)} 个仿真批次",
            "creator": f"NLoSLocate v{__version__}",
            "producer": "PyMuPDF",
        })
        out.save(output)
        total = out.page_count
        out.close()
    except Exception as e:
        raise ReportError(f"PDF合并失败: {e}") from e
    finally:
        if os.path.exists(toc_path):
            os.remove(toc_path)

    logging.info(f"PDF合并完成: {output}，总页数: {total}")
    return output


def write_sweep_report(pages: Sequence[Tuple[str, Mapping[str, Any], ErrorCdf]], output: str) -> str:
    """扫描报告：每个取值一页，最后合并"""
    tmp_dir = tempfile.mkdtemp(prefix="nlos_report_")
    try:
        entries = []
        for k, (title, summary, cdf) in enumerate(pages):
            page_path = os.path.join(tmp_dir, f"page_{k}.pdf")
            entries.append((title, write_campaign_pdf(summary, cdf, page_path, title)))
        return merge_reports(entries, output)
    finally:
        for name in os.listdir(tmp_dir):
            os.remove(os.path.join(tmp_dir, name))
        os.rmdir(tmp_dir)
